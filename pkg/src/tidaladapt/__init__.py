"""Goal-oriented anisotropic mesh adaptation for tidal turbine farms."""
