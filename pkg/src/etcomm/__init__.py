"""Event-triggered consensus communication for multi-agent formation control."""
