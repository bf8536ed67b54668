# Shared utilities for the edge statistics scripts
