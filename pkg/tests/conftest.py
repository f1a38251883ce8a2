# tests/conftest.py
# Shared pytest setup. Hypothesis profiles: "default" for local runs,
# "ci" for slower shared runners (no deadline, fewer examples).

import os

from hypothesis import settings

settings.register_profile("ci", deadline=None, max_examples=25)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))
