"""Command-line pipeline: simulate, fit, postprocess, diagnose, summarize.

Every stage reads a JSON config (``--config``) merged over the defaults in
:data:`DEFAULT_CONFIG`; flags override file values.  Artifacts live in the
output directory::

    data.csv, truth.json            simulate
    chains/chain_XX.npz, manifest.json
                                    fit
    aligned.npz, perm_log.csv       postprocess
    diagnostics.json, diagnostics.txt
                                    diagnose
    tables/*.csv                    summarize

Exit codes: 0 success, 2 validation error, 3 numerical failure,
4 diagnostics warning.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
import time
import zipfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, diagnostics, ingest, model, postprocess, sampler
from .errors import ConfigurationError, DegenerateDataError, DomainError, MissingArtifactError, ValidationError

logger = logging.getLogger("mixedmds")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_DIAGNOSTICS = 4

DEFAULT_CONFIG = {
    "out": "mixedmds-run",
    "data": None,  # distance CSV; defaults to <out>/data.csv
    "signals": None,  # optional .npy trial tensor with a JSON sidecar
    "seed": 0,
    "synthetic": {},
    "hyperparameters": {"D_T": "auto"},
    "schedule": {"n_iter": 100_000, "burn_in": 4_000, "thin": 10, "freeze_H_after": None},
    "chains": 1,
    "workers": None,
    "init": "prior",
    "level": 0.9,
    "exports": {"traces": True, "features": True, "weights": True},
}

# keys that do not change results
_UNHASHED = ("out", "workers", "seed")


# ---------------------------------------------------------------------------
# Config


def merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: Optional[str], overrides: Optional[dict] = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise MissingArtifactError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
        unknown = set(user) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        cfg = merge(cfg, user)
    if overrides:
        cfg = merge(cfg, overrides)
    return cfg


def config_hash(cfg: dict) -> str:
    """Short SHA-256 of the canonical JSON of the result-relevant config."""
    relevant = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    blob = json.dumps(relevant, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_hyperparameters(cfg: dict) -> model.Hyperparameters:
    fields = {f.name for f in dataclasses.fields(model.Hyperparameters)}
    block = dict(cfg.get("hyperparameters") or {})
    unknown = set(block) - fields
    if unknown:
        raise ConfigurationError(f"unknown hyperparameters: {sorted(unknown)}")
    return model.Hyperparameters(**block)


def build_schedule(cfg: dict) -> sampler.Schedule:
    block = dict(cfg.get("schedule") or {})
    try:
        return sampler.Schedule(**block)
    except TypeError as exc:
        raise ConfigurationError(f"bad schedule block: {exc}") from exc


def build_synthetic(cfg: dict) -> ingest.SyntheticSpec:
    block = dict(cfg.get("synthetic") or {})
    block.setdefault("seed", cfg["seed"])
    try:
        return ingest.SyntheticSpec(**block)
    except TypeError as exc:
        raise ConfigurationError(f"bad synthetic block: {exc}") from exc


def chain_seeds(root: int, chains: int) -> list:
    """Chain ``k`` (0-based) uses seed ``root + k``."""
    return [int(root) + k for k in range(chains)]


# ---------------------------------------------------------------------------
# Atomic, deterministic file output


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode())


def write_json(path, obj):
    atomic_write_text(path, json.dumps(diagnostics._jsonable(obj), indent=2, sort_keys=True) + "\n")


def npz_bytes(arrays: dict) -> bytes:
    """``.npz`` archive with fixed member timestamps, so equal arrays give equal bytes."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, member.getvalue())
    return buf.getvalue()


def load_npz(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path}")
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def csv_text(header: Sequence[str], rows) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return out.getvalue()


# ---------------------------------------------------------------------------
# Chain persistence


def chain_to_arrays(chain: sampler.ChainOutput) -> dict:
    """Pack a chain into fixed-shape arrays, padding dimensions to the largest H."""
    T = len(chain)
    d0 = chain.draws[0]
    H = max(d.H for d in chain.draws)
    S, N, J = d0.S, d0.w_ind.shape[0], d0.J
    eta = np.full((T, S, H), np.nan)
    phi = np.full((T, S, H), np.nan)
    w_ind = np.full((T, N, H), np.nan)
    mgp = np.full((T, H), np.nan)
    for t, d in enumerate(chain.draws):
        eta[t, :, : d.H] = d.eta
        phi[t, :, : d.H] = d.phi
        w_ind[t, :, : d.H] = d.w_ind
        mgp[t, : d.H] = d.mgp_delta
    arrays = {
        "eta": eta, "phi": phi, "w_ind": w_ind, "mgp_delta": mgp,
        "H": np.array([d.H for d in chain.draws], dtype=np.int64),
        "w_group": np.stack([d.w_group for d in chain.draws]),
        "sigma2": np.stack([d.sigma2 for d in chain.draws]),
        "group": np.asarray(d0.group, dtype=np.int64),
        "iterations": np.asarray(chain.iterations, dtype=np.int64),
        "H_trace": np.asarray(chain.H_trace, dtype=np.int64),
        "D_trace": np.asarray(chain.D_trace, dtype=float),
        "meta": np.array(json.dumps(diagnostics._jsonable(chain.meta), sort_keys=True)),
    }
    for block, rates in chain.accept_rates.items():
        arrays[f"accept_{block}"] = np.asarray(rates, dtype=float)
    return arrays


def chain_from_arrays(arrays: dict) -> sampler.ChainOutput:
    draws = []
    group = arrays["group"]
    for t in range(arrays["H"].size):
        H = int(arrays["H"][t])
        draws.append(model.ModelState(
            eta=arrays["eta"][t, :, :H], w_group=arrays["w_group"][t], w_ind=arrays["w_ind"][t, :, :H],
            phi=arrays["phi"][t, :, :H], mgp_delta=arrays["mgp_delta"][t, :H],
            sigma2=arrays["sigma2"][t], group=group,
        ))
    rates = {k[len("accept_"):]: v for k, v in arrays.items() if k.startswith("accept_")}
    return sampler.ChainOutput(
        draws=draws, iterations=arrays["iterations"], H_trace=arrays["H_trace"],
        D_trace=arrays["D_trace"], accept_rates=rates, meta=json.loads(str(arrays["meta"])),
    )


def save_chain(path, chain: sampler.ChainOutput):
    atomic_write_bytes(path, npz_bytes(chain_to_arrays(chain)))


def load_chain(path) -> sampler.ChainOutput:
    return chain_from_arrays(load_npz(path))


def save_aligned(path, aligned: postprocess.AlignedSamples, chain_index: np.ndarray):
    atomic_write_bytes(path, npz_bytes({
        "eta_shared": aligned.eta_shared, "w_group": aligned.w_group, "w_ind": aligned.w_ind,
        "group": aligned.group.astype(np.int64), "reference": aligned.reference,
        "perm": np.array([p.perm for p in aligned.perm_log], dtype=np.int64).reshape(aligned.T, -1),
        "signs": np.array([p.signs for p in aligned.perm_log], dtype=np.int64).reshape(aligned.T, -1),
        "kept": aligned.kept.astype(np.int64), "chain": np.asarray(chain_index, dtype=np.int64),
        "dropped": np.int64(aligned.dropped), "passes": np.int64(aligned.passes),
    }))


def load_aligned(path) -> tuple[postprocess.AlignedSamples, np.ndarray]:
    a = load_npz(path)
    perm_log = [postprocess.SignedPermutation(tuple(map(int, p)), tuple(map(int, s)))
                for p, s in zip(a["perm"], a["signs"])]
    aligned = postprocess.AlignedSamples(
        eta_shared=a["eta_shared"], w_group=a["w_group"], w_ind=a["w_ind"], group=a["group"],
        perm_log=perm_log, reference=a["reference"], kept=a["kept"],
        dropped=int(a["dropped"]), passes=int(a["passes"]),
    )
    return aligned, a["chain"]


# ---------------------------------------------------------------------------
# Stages


class Run:
    """Resolved config plus artifact paths of one output directory."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.hash = config_hash(cfg)

    @property
    def data_path(self) -> Path:
        return Path(self.cfg["data"]) if self.cfg.get("data") else self.out / "data.csv"

    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def chain_path(self, k: int) -> Path:
        return self.out / "chains" / f"chain_{k + 1:02d}.npz"

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"missing artifact {path}; run `{stage}` first")
        return path

    def load_data(self) -> model.DistanceDataset:
        if self.cfg.get("signals"):
            signals = ingest.load_trial_signals(self.require(Path(self.cfg["signals"]), "simulate"))
            return ingest.distances_from_signals(ingest.preprocess_trials(signals), signals.group)
        return ingest.read_distances_csv(self.require(self.data_path, "simulate"))

    def load_manifest(self) -> dict:
        return json.loads(self.require(self.manifest_path, "fit").read_text())

    def load_chains(self) -> list:
        manifest = self.load_manifest()
        return [load_chain(self.require(self.out / f, "fit")) for f in manifest["chain_files"]]

    def table(self, name: str, header, rows):
        rows = ([self.hash] + list(r) for r in rows)
        atomic_write_text(self.out / "tables" / f"{name}.csv", csv_text(["config_hash"] + list(header), rows))


def cmd_simulate(run: Run) -> int:
    spec = build_synthetic(run.cfg)
    data, truth = ingest.generate_synthetic(spec)
    atomic_write_text(run.data_path, ingest.format_distances_csv(data))
    record = ingest.truth_record(truth, data, spec)
    record["config_hash"] = run.hash
    write_json(run.out / "truth.json", record)
    logger.info("wrote %d subjects x %d pairs to %s", data.N, data.P, run.data_path)
    return EXIT_OK


def _run_one(args):
    data, hp, init, schedule, seed = args
    return sampler.run_chain(data, hp, init=init, schedule=schedule, seed=seed)


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def cmd_fit(run: Run, force: bool = False) -> int:
    cfg = run.cfg
    data = run.load_data()
    hp = build_hyperparameters(cfg)
    hp.resolve(data)  # validate before spending time
    schedule = build_schedule(cfg)
    chains = int(cfg["chains"])
    if chains < 1:
        raise ConfigurationError("chains must be at least 1")
    seeds = chain_seeds(cfg["seed"], chains)
    input_path = Path(cfg["signals"]) if cfg.get("signals") else run.data_path
    digest = _file_digest(input_path)
    files = [str(run.chain_path(k).relative_to(run.out)) for k in range(chains)]
    if not force and run.manifest_path.exists():
        old = json.loads(run.manifest_path.read_text())
        if (old.get("config_hash"), old.get("chain_seeds"), old.get("data_sha256")) == (run.hash, seeds, digest) \
                and all((run.out / f).exists() for f in files):
            logger.info("chains for config %s already present; use --force to refit", run.hash)
            return EXIT_OK
    workers = cfg.get("workers") or min(chains, os.cpu_count() or 1)
    jobs = [(data, hp, cfg["init"], schedule, s) for s in seeds]
    start = time.perf_counter()
    if workers > 1 and chains > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_one, jobs))
    else:
        outputs = [_run_one(j) for j in jobs]
    wall = time.perf_counter() - start
    for k, out in enumerate(outputs):
        save_chain(run.chain_path(k), out)
    write_json(run.manifest_path, {
        "config_hash": run.hash,
        "config": cfg,
        "root_seed": int(cfg["seed"]),
        "chain_seeds": seeds,
        "chain_files": files,
        "frozen_H": [out.meta["frozen_H"] for out in outputs],
        "draws_per_chain": [len(out) for out in outputs],
        "data_sha256": digest,
        "wall_time_s": round(wall, 3),
        "version": __version__,
    })
    logger.info("fitted %d chain(s) in %.1f s", chains, wall)
    return EXIT_OK


def _common_H(chains: list) -> tuple[list, list]:
    """Indices of chains at the most common frozen H (ties: smaller H)."""
    H = [c.meta.get("frozen_H", c.draws[0].H) for c in chains]
    values, counts = np.unique(H, return_counts=True)
    target = int(values[np.argmax(counts)])
    keep = [k for k, h in enumerate(H) if h == target]
    if len(keep) < len(chains):
        logger.warning("chains froze at different H %s; using those at H=%d", H, target)
    return keep, H


def cmd_postprocess(run: Run) -> int:
    chains = run.load_chains()
    keep, _ = _common_H(chains)
    per_chain = [postprocess.align_chain(chains[k], seed=run.cfg["seed"]) for k in keep]
    merged = postprocess.merge_aligned(per_chain)
    chain_index = np.concatenate([np.full(a.T, k) for k, a in zip(keep, per_chain)])
    if merged.dropped:
        logger.warning("dropped %d degenerate draws", merged.dropped)
    save_aligned(run.out / "aligned.npz", merged, chain_index)
    rows = []
    for t, (k, p) in enumerate(zip(chain_index, merged.perm_log)):
        it = int(chains[k].iterations[merged.kept[t]])
        rows.append([int(k) + 1, int(merged.kept[t]), it, " ".join(map(str, p.perm)), " ".join(map(str, p.signs))])
    atomic_write_text(run.out / "perm_log.csv",
                      csv_text(["config_hash", "chain", "draw", "iteration", "perm", "signs"],
                               ([run.hash] + r for r in rows)))
    return EXIT_OK


def cmd_diagnose(run: Run) -> int:
    chains = run.load_chains()
    report = diagnostics.diagnose_chains(chains)
    record = report.to_dict()
    record["config_hash"] = run.hash
    write_json(run.out / "diagnostics.json", record)
    atomic_write_text(run.out / "diagnostics.txt", f"config {run.hash}\n" + report.to_text())
    sys.stdout.write(report.to_text())
    if report.flags:
        logger.warning("PSRF above %.2f for %d quantities", report.threshold, len(report.flags))
        return EXIT_DIAGNOSTICS
    return EXIT_OK


def pooled_chain(chains: list) -> sampler.ChainOutput:
    """Concatenate stored draws and post-burn-in traces of several chains."""
    H_post = np.concatenate([c.H_trace[c.meta.get("burn_in", 0):] for c in chains])
    return sampler.ChainOutput(
        draws=[d for c in chains for d in c.draws],
        iterations=np.concatenate([c.iterations for c in chains]),
        H_trace=H_post, D_trace=np.concatenate([c.D_trace[c.meta.get("burn_in", 0):] for c in chains]),
        accept_rates={}, meta={"burn_in": 0},
    )


def cmd_summarize(run: Run) -> int:
    cfg = run.cfg
    data = run.load_data()
    chains = run.load_chains()
    keep, frozen = _common_H(chains)
    aligned, _ = load_aligned(run.require(run.out / "aligned.npz", "postprocess"))
    pooled = pooled_chain([chains[k] for k in keep])
    summary = postprocess.summarize(aligned, pooled, level=cfg["level"])
    rows, cols = model.pair_indices(data.S)
    J = data.J

    def interval_row(q, idx):
        return [float(q.median[idx]), float(q.lower[idx]), float(q.upper[idx])]

    bounds = ["median", "lower", "upper"]
    g = summary["group_distance"]
    run.table("group_distances", ["group", "s", "r"] + bounds,
              ([j + 1, rows[p] + 1, cols[p] + 1] + interval_row(g, (j, p)) for j in range(J) for p in range(data.P)))
    ind = summary["individual_distance"]
    run.table("individual_distances", ["group", "subject", "s", "r", "observed"] + bounds,
              ([int(data.group[k]) + 1, k - data.start(int(data.group[k])) + 1, rows[p] + 1, cols[p] + 1,
                float(data.d[k, p])] + interval_row(ind, (k, p))
               for k in range(data.N) for p in range(data.P)))
    s2 = summary["sigma2"]
    run.table("noise", ["group"] + bounds, ([j + 1] + interval_row(s2, j) for j in range(J)))
    H = summary["H"]
    run.table("dimensions", ["chain", "frozen_H", "used"] + bounds,
              ([k + 1, frozen[k], int(k in keep)] + interval_row(H, ()) for k in range(len(chains))))
    H_dim = aligned.eta_shared.shape[2]
    exports = cfg.get("exports") or {}
    if exports.get("features", True):
        feats = []
        sh, gr, iv = summary["shared_feature"], summary["group_feature"], summary["individual_feature"]
        for s in range(data.S):
            for h in range(H_dim):
                feats.append(["shared", "", "", s + 1, h + 1] + interval_row(sh, (s, h)))
        for j in range(J):
            for s in range(data.S):
                for h in range(H_dim):
                    feats.append(["group", j + 1, "", s + 1, h + 1] + interval_row(gr, (j, s, h)))
        for k in range(data.N):
            j = int(data.group[k])
            for s in range(data.S):
                for h in range(H_dim):
                    feats.append(["individual", j + 1, k - data.start(j) + 1, s + 1, h + 1]
                                 + interval_row(iv, (k, s, h)))
        run.table("features", ["level", "group", "subject", "stimulus", "dimension"] + bounds, feats)
    if exports.get("weights", True):
        wg, wi = summary["w_group"], summary["w_ind"]
        w = [["group", j + 1, "", ""] + interval_row(wg, j) for j in range(J)]
        for k in range(data.N):
            j = int(data.group[k])
            for h in range(H_dim):
                w.append(["individual", j + 1, k - data.start(j) + 1, h + 1] + interval_row(wi, (k, h)))
        run.table("weights", ["level", "group", "subject", "dimension"] + bounds, w)
    if exports.get("traces", True):
        run.table("traces", ["chain", "iteration", "H", "D"],
                  ([k + 1, t, int(c.H_trace[t]), float(c.D_trace[t])]
                   for k, c in enumerate(chains) for t in range(c.H_trace.size)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="root seed (chain k uses seed + k)")
    common.add_argument("--chains", type=int, help="number of chains")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="distance CSV (group,subject,s,r,d)")
    common.add_argument("--n-iter", type=int, dest="n_iter")
    common.add_argument("--burn-in", type=int, dest="burn_in")
    common.add_argument("--thin", type=int)
    common.add_argument("--level", type=float, help="credible level")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mixedmds", description="Bayesian mixed multidimensional scaling")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write a synthetic dataset and its ground truth")
    fit = sub.add_parser("fit", parents=[common], help="run the sampler")
    fit.add_argument("--force", action="store_true", help="refit even if matching chains exist")
    sub.add_parser("postprocess", parents=[common], help="normalize and align feature draws")
    sub.add_parser("diagnose", parents=[common], help="convergence diagnostics")
    sub.add_parser("summarize", parents=[common], help="posterior summary tables")
    return parser


def overrides_from_args(args) -> dict:
    out = {}
    for key in ("seed", "chains", "out", "data", "level"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    schedule = {k: getattr(args, k) for k in ("n_iter", "burn_in", "thin") if getattr(args, k, None) is not None}
    if schedule:
        out["schedule"] = schedule
    return out


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "postprocess": cmd_postprocess,
    "diagnose": cmd_diagnose,
    "summarize": cmd_summarize,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(load_config(args.config, overrides_from_args(args)))
        if args.command == "fit":
            return cmd_fit(run, force=args.force)
        return COMMANDS[args.command](run)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        for row in getattr(exc, "rows", None) or []:
            print(f"  {row}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigurationError, MissingArtifactError, DegenerateDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ArithmeticError, DomainError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
