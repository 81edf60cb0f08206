"""Privacy-preserving fall detection over three-party Shamir MPC."""

__version__ = "0.1.0"
