# Pyramid level contribution analysis
