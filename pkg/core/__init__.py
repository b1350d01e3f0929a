# Core module: configuration, logging, errors and task constants
