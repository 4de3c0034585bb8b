# Core modules: config, models, errors, records, logging
