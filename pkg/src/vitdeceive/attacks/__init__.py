"""White-box and black-box attacks."""
