"""Rebuild the pipeline artifacts used by the acceptance suite.

    python3 scripts/build_artifacts.py                 # every config in configs/
    python3 scripts/build_artifacts.py unicycle-qnet   # one of them

Each ``configs/<env>-<model>.json`` is run through ``run_pipeline`` and the
result is written to ``artifacts/<env>-<model>/``.
"""
import argparse
import json
import logging
import time
from pathlib import Path

from hjcert.pipeline import PipelineConfig, run_pipeline

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("names", nargs="*", help="config stems, default: all")
    ap.add_argument("--configs", default=ROOT / "configs", type=Path)
    ap.add_argument("--out", default=ROOT / "artifacts", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    names = args.names or sorted(p.stem for p in args.configs.glob("*.json"))
    for name in names:
        cfg = PipelineConfig.from_dict(json.loads((args.configs / f"{name}.json").read_text()))
        t0 = time.perf_counter()
        art = run_pipeline(cfg, progress=lambda m, n=name: logging.info("%s: %s", n, m))
        run = art.save(args.out / name)
        logging.info("%s: %s in %.0f s -> %s", name, art.label, time.perf_counter() - t0, run)


if __name__ == "__main__":
    main()
