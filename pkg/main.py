"""
Multiplexed NV-center readout toolkit.

Equivalent to the installed `nvmux` script, for running from a checkout:

    python main.py simulate-frames --config nvmux/recipes/charge_state.json
    python main.py analyze --config nvmux/recipes/charge_state.json
"""
import sys

from nvmux.cli import main


sys.exit(main())
