"""retrowpt.

Retrodirective multi-user wireless power transfer simulator with distributed
beacon-power control.
"""

import os

__version__ = os.getenv("APP_VERSION", "dev")
