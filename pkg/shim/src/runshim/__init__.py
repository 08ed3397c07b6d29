"""runshim: crash-only harness around one generated experiment script.

The shim rewrites the script's designated seed line when asked, executes
the script with the workspace as its working directory, and always leaves
a valid manifest.json behind, whatever the script did. It deliberately
depends on nothing outside the standard library so it can run inside the
experiment sandbox itself.
"""

from .manifest import MANIFEST_SCHEMA, ShimManifest, scan_workspace
from .runner import inject_seed, shim_run

__version__ = "0.1.0"

__all__ = [
    "MANIFEST_SCHEMA",
    "ShimManifest",
    "inject_seed",
    "scan_workspace",
    "shim_run",
    "__version__",
]
