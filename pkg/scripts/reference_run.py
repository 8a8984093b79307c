"""Execute the full default pipeline into runs/reference.

This is the documented reference run the acceptance suite measures against.
Finished stages are cached; re-running after an interruption resumes where it
stopped. Usage: python scripts/reference_run.py [out_dir]
"""

import json
import sys
import time
from pathlib import Path

from stylefield.config import load_config
from stylefield.pipeline import run_pipeline


def main() -> None:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/reference")
    cfg = load_config(None, None)
    t0 = time.time()
    manifests = run_pipeline(
        cfg, out, progress=lambda s: print(f"[{time.time() - t0:7.0f}s] stage {s}", flush=True)
    )
    print(f"total {time.time() - t0:.0f}s")
    for m in manifests:
        hit = " (cached)" if m.get("cache_hit") else ""
        print(f"  {m['stage']}: {m['timing']['wall_seconds']:.1f}s{hit}")
    report = json.loads((out / "eval" / "report.json").read_text())
    print(json.dumps(report, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
