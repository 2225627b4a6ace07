# Integration Tests Package 