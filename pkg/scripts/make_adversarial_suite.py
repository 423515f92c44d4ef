#!/usr/bin/env python3
"""Regenerate the bundled adversarial mock suite under data/.

The builder is deterministic, so rerunning this script reproduces the
checked-in files byte for byte.
"""

import argparse
from pathlib import Path

from mugate.adversarial import DEFAULT_SEED, write_suite

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED)
    parser.add_argument("--out-dir", default=str(ROOT / "data"))
    args = parser.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = out / "adversarial_items.jsonl"
    script = out / "adversarial_script.jsonl"
    write_suite(dataset, script, seed=args.seed)
    print(f"wrote {dataset}")
    print(f"wrote {script}")


if __name__ == "__main__":
    main()
