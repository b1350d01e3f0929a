# Tests for the affect pyramid toolkit
