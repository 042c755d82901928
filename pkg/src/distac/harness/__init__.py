"""Configuration, persistence, FLOP tables, reports and the command line."""
