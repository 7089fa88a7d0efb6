"""Resumable pattern ablation: train several layer patterns over several seeds and compare.

Every run stores its optimizer state after each epoch, so an interrupted
study picks up where it stopped and produces the same numbers as an
uninterrupted one. Usage::

    python3 -m dcno.experiments --workdir runs/ablation [--res 64 --epochs 100 ...]
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import io
from .datagen import GenConfig, make_dataset
from .diagnostics import DEFAULT_THRESHOLD, freq_split_error
from .layers import ModelConfig, build_model
from .training import EpochRecord, OptimizerState, TrainConfig, TrainState, per_sample_errors, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationConfig:
    task: str = "trigonometric"
    res: int = 64
    n_train: int = 200
    n_test: int = 50
    epochs: int = 100
    width: int = 32
    modes: int = 12
    batch_size: int = 8
    patterns: Tuple[str, ...] = ("FCFCFCF", "FFFFFFF", "CCCCCCC")
    seeds: Tuple[int, ...] = (0, 1, 2)
    data_seed: int = 1234
    dtype: str = "float32"
    threshold: float = DEFAULT_THRESHOLD

    def key(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class RunResult:
    pattern: str
    seed: int
    test_rel_l2: float
    low_err: float
    high_err: float
    seconds: float
    records: List[dict] = field(default_factory=list)


def _data_path(workdir: str) -> str:
    return os.path.join(workdir, "data.bin")


def load_or_make_data(cfg: AblationConfig, workdir: str) -> io.DatasetContainer:
    path = _data_path(workdir)
    n = cfg.n_train + cfg.n_test
    if os.path.exists(path):
        data = io.read_dataset(path)
        if data.samples == n and data.resolution == (cfg.res, cfg.res):
            return data
    log.info("generating %d %s samples at %d^2", n, cfg.task, cfg.res)
    data = make_dataset(cfg.task, n, cfg.res, GenConfig(), seed=cfg.data_seed)
    io.write_dataset(path, data)
    return data


def _state_path(workdir: str, pattern: str, seed: int) -> str:
    return os.path.join(workdir, f"state_{pattern}_{seed}.npz")


def _save_state(path: str, st: TrainState) -> None:
    tmp = path + ".tmp.npz"
    recs = np.array([[r.epoch, r.train_loss, r.val_rel_l2, r.lr] for r in st.records]).reshape(-1, 4)
    np.savez(tmp, theta=st.theta, m=st.opt.m, v=st.opt.v, step=st.opt.step, epoch=st.epoch, records=recs)
    os.replace(tmp, path)


def _load_state(path: str) -> Optional[TrainState]:
    if not os.path.exists(path):
        return None
    z = np.load(path)
    recs = [EpochRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in z["records"]]
    st = TrainState(z["theta"], OptimizerState(z["m"], z["v"], int(z["step"])), int(z["epoch"]),
                    records=recs)
    st.best_theta = st.theta.copy()
    return st


def run_one(cfg: AblationConfig, data: io.DatasetContainer, pattern: str, seed: int,
            workdir: str) -> RunResult:
    mcfg = ModelConfig(pattern=pattern, width=cfg.width, modes=(cfg.modes, cfg.modes))
    tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, seed=seed,
                       n_train=cfg.n_train, n_val=0, dtype=cfg.dtype)
    train_set = data.subset(0, cfg.n_train)
    test_set = data.subset(cfg.n_train, cfg.n_train + cfg.n_test)
    model = build_model(mcfg, seed)
    state_path = _state_path(workdir, pattern, seed)
    state = _load_state(state_path)
    t0 = time.time()
    result = train(model, train_set, tcfg, state=state,
                   on_epoch=lambda st, _work: _save_state(state_path, st))
    preds = result.model.predict(test_set.inputs)
    errs = per_sample_errors(result.model, test_set.inputs, test_set.outputs)
    bands = np.array([freq_split_error(p, t, cfg.threshold, data.domain_length)
                      for p, t in zip(preds, test_set.outputs)])
    return RunResult(pattern, seed, float(np.mean(errs)), float(np.mean(bands[:, 0])),
                     float(np.mean(bands[:, 1])), time.time() - t0,
                     [asdict(r) for r in result.records])


def run_ablation(cfg: AblationConfig, workdir: str) -> Dict[str, RunResult]:
    os.makedirs(workdir, exist_ok=True)
    results_path = os.path.join(workdir, "results.json")
    stored = {}
    if os.path.exists(results_path):
        with open(results_path) as fh:
            blob = json.load(fh)
        if blob.get("config") == cfg.key():
            stored = blob["runs"]
    data = load_or_make_data(cfg, workdir)
    for seed in cfg.seeds:
        for pattern in cfg.patterns:
            name = f"{pattern}/{seed}"
            if name in stored:
                continue
            log.info("training %s", name)
            stored[name] = asdict(run_one(cfg, data, pattern, seed, workdir))
            with open(results_path + ".tmp", "w") as fh:
                json.dump({"config": cfg.key(), "runs": stored}, fh, indent=1)
            os.replace(results_path + ".tmp", results_path)
            state = _state_path(workdir, pattern, seed)
            if os.path.exists(state):
                os.remove(state)
    return {k: RunResult(**v) for k, v in stored.items()}


def load_results(workdir: str, cfg: AblationConfig) -> Dict[str, RunResult]:
    """Completed runs for exactly this configuration (empty when none)."""
    path = os.path.join(workdir, "results.json")
    if not os.path.exists(path):
        return {}
    with open(path) as fh:
        blob = json.load(fh)
    if blob.get("config") != cfg.key():
        return {}
    return {k: RunResult(**v) for k, v in blob["runs"].items()}


def summarize(results: Dict[str, RunResult], cfg: AblationConfig) -> dict:
    """Median test error per pattern and per-seed high-frequency comparisons."""
    med = {}
    for p in cfg.patterns:
        vals = [results[f"{p}/{s}"].test_rel_l2 for s in cfg.seeds if f"{p}/{s}" in results]
        med[p] = float(np.median(vals)) if len(vals) == len(cfg.seeds) else float("nan")
    high_wins = []
    for s in cfg.seeds:
        a, b = results.get(f"FCFCFCF/{s}"), results.get(f"FFFFFFF/{s}")
        if a is not None and b is not None:
            high_wins.append(a.high_err < b.high_err)
    return {"median": med, "high_wins": high_wins}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python3 -m dcno.experiments")
    p.add_argument("--workdir", required=True)
    defaults = AblationConfig()
    for name in ("res", "n_train", "n_test", "epochs", "width", "modes", "batch_size", "data_seed"):
        p.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(defaults, name))
    p.add_argument("--dtype", default=defaults.dtype, choices=("float32", "float64"))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--patterns", default=",".join(defaults.patterns))
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = AblationConfig(res=args.res, n_train=args.n_train, n_test=args.n_test, epochs=args.epochs,
                         width=args.width, modes=args.modes, batch_size=args.batch_size,
                         data_seed=args.data_seed, dtype=args.dtype,
                         seeds=tuple(int(s) for s in args.seeds.split(",")),
                         patterns=tuple(args.patterns.split(",")))
    results = run_ablation(cfg, args.workdir)
    summary = summarize(results, cfg)
    for k in sorted(results):
        r = results[k]
        print(f"{k}: test {r.test_rel_l2:.4f} low {r.low_err:.4f} high {r.high_err:.4f} ({r.seconds:.0f}s)")
    print("median:", json.dumps(summary["median"]))
    print("FCFCFCF high-frequency wins over FFFFFFF:", summary["high_wins"])
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
