"""tedclean: turn raw award-notice tables into a clean relational database."""

__version__ = "0.1.0"
