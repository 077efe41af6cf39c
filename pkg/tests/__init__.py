# Tests package for the cascade proposal pipeline
