"""Write every built-in preset to configs/<name>.json (usable with `eol run --config`)."""

import json
import os
import sys

from eol.experiment import PRESETS, preset

out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(os.path.dirname(__file__), "..", "configs")
os.makedirs(out, exist_ok=True)
for name in sorted(PRESETS):
    cfg = preset(name).to_dict()
    cfg.pop("out")
    cfg.pop("threads")
    with open(os.path.join(out, f"{name}.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{name}: {preset(name).hash}")
