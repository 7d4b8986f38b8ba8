# Integration tests for mr1s
