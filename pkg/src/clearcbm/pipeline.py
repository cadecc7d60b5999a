"""Pipeline driver: config loading with dataset profiles, the five stages
(score training, bottleneck learning, selection, head training, evaluation),
explanations, and the run report.

Every stage is a pure function of (config, input files, seed): artifacts are
written with fixed names under the output directory and are byte-identical
across reruns. Stage seeds are derived from the single config seed, one
independent stream per stage.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .bottleneck import (
    ApproxTrainConfig,
    load_bottleneck,
    save_bottleneck,
    train_approximation,
)
from .cbm import (
    HeadTrainConfig,
    evaluate,
    explain,
    load_model,
    save_model,
    train_head,
)
from .dataio import (
    DatasetManifest,
    EmbeddingSet,
    load_manifest,
    normalize_rows,
    read_embeddings,
    write_embeddings,
)
from .errors import ConfigError, DataError, EmptySplitError, InfeasibleSelectionError
from .sampling import LangevinConfig
from .scorematch import SsmConfig, load_score_net, train_score
from .selection import (
    Assignment,
    assign,
    build_selected,
    select_nn,
    select_random,
    similarity_matrix,
    top_m_filter,
)

SELECTION_METHODS = ("hungarian", "nn", "random")

# stage-seed derivation tags; never reuse across stages
_SEED_SCORE, _SEED_APPROX, _SEED_SELECT, _SEED_HEAD = 101, 102, 103, 104


@dataclass
class PipelineConfig:
    images: Path
    descriptors: Path
    manifest: Path
    out_dir: Path
    k: int
    seed: int
    score: SsmConfig
    approx: ApproxTrainConfig
    head: HeadTrainConfig
    selection_method: str = "hungarian"
    m0: int = 5
    raw: dict = field(default_factory=dict)  # echoed into reports

    def validate(self) -> None:
        for p in (self.images, self.descriptors, self.manifest):
            if not Path(p).exists():
                raise ConfigError(f"input file does not exist: {p}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.m0 < 1:
            raise ConfigError("selection m0 must be >= 1")
        if self.selection_method not in SELECTION_METHODS:
            raise ConfigError(
                f"selection method {self.selection_method!r} not in {SELECTION_METHODS}"
            )
        self.score.validate()
        self.approx.validate()
        self.head.validate()


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_profiles() -> dict:
    with resources.files("clearcbm").joinpath("profiles.json").open() as fh:
        return json.load(fh)


def load_config(
    path: str | Path,
    out_dir: str | Path | None = None,
    seed: int | None = None,
    method: str | None = None,
    k: int | None = None,
) -> PipelineConfig:
    """Read the run config JSON, applying the named profile's defaults and
    any command-line overrides."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON: {e}") from e

    if "profile" in doc:
        profiles = load_profiles()
        name = doc["profile"]
        if name not in profiles:
            raise ConfigError(f"unknown profile {name!r}; have {sorted(profiles)}")
        doc = _merge(profiles[name], doc)

    if seed is not None:
        doc["seed"] = seed
    if method is not None:
        doc.setdefault("selection", {})["method"] = method
    if k is not None:
        doc["k"] = k
    if out_dir is not None:
        doc.setdefault("paths", {})["out_dir"] = str(out_dir)

    paths = doc.get("paths", {})
    for key in ("images", "descriptors", "manifest", "out_dir"):
        if key not in paths:
            raise ConfigError(f"config is missing paths.{key}")
    if "k" not in doc:
        raise ConfigError("config is missing k")

    base_seed = int(doc.get("seed", 0))
    score_doc = dict(doc.get("score", {}))
    approx_doc = dict(doc.get("approx", {}))
    head_doc = dict(doc.get("head", {}))
    sel_doc = dict(doc.get("selection", {}))

    score_cfg = SsmConfig(
        epochs=int(score_doc.get("epochs", 1000)),
        learning_rate=float(score_doc.get("learning_rate", 1e-4)),
        image_batch_size=int(score_doc.get("image_batch_size", 128)),
        descriptor_batch_size=int(score_doc.get("descriptor_batch_size", 32)),
        n_slices=int(score_doc.get("n_slices", 1)),
        slice_distribution=score_doc.get("slice_distribution", "rademacher"),
        hidden_dim=int(score_doc.get("hidden_dim", 1024)),
        seed=0,  # filled per stage below
    )
    approx_cfg = ApproxTrainConfig(
        k=int(doc["k"]),
        lam=float(approx_doc.get("lambda", 0.01)),
        langevin=LangevinConfig(
            eps=float(approx_doc.get("epsilon", 1.0)),
            steps=int(approx_doc.get("steps", 7)),
        ),
        regularizer=approx_doc.get("regularizer", "sm"),
        lr=float(approx_doc.get("lr", 0.01)),
        batch_size=int(approx_doc.get("batch_size", 4096)),
        epochs=int(approx_doc.get("epochs", 1000)),
        seed=0,
    )
    head_cfg = HeadTrainConfig(
        epochs=int(head_doc.get("epochs", 2000)),
        lr=float(head_doc.get("lr", 0.01)),
        batch_size=int(head_doc.get("batch_size", 4096)),
        seed=0,
    )

    cfg = PipelineConfig(
        images=Path(paths["images"]),
        descriptors=Path(paths["descriptors"]),
        manifest=Path(paths["manifest"]),
        out_dir=Path(paths["out_dir"]),
        k=int(doc["k"]),
        seed=base_seed,
        score=score_cfg,
        approx=approx_cfg,
        head=head_cfg,
        selection_method=sel_doc.get("method", "hungarian"),
        m0=int(sel_doc.get("m0", 5)),
        raw=doc,
    )
    cfg.score.seed = _stage_seed(cfg.seed, _SEED_SCORE)
    cfg.approx.seed = _stage_seed(cfg.seed, _SEED_APPROX)
    cfg.head.seed = _stage_seed(cfg.seed, _SEED_HEAD)
    cfg.validate()
    return cfg


def _stage_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence((seed, tag)).generate_state(1, np.uint64)[0])


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


@dataclass
class Dataset:
    images: EmbeddingSet  # row-normalized
    pool: EmbeddingSet  # row-normalized
    manifest: DatasetManifest
    x: np.ndarray  # (n, d) f64
    pool_x: np.ndarray  # (|P|, d) f64
    labels: np.ndarray
    splits: dict[str, np.ndarray]


def load_dataset(cfg: PipelineConfig) -> Dataset:
    """Load CLEB files and manifest, cross-validate counts, normalize rows."""
    images = normalize_rows(read_embeddings(cfg.images))
    pool = normalize_rows(read_embeddings(cfg.descriptors))
    manifest = load_manifest(cfg.manifest)
    if images.rows != len(manifest.items):
        raise DataError(
            f"image rows ({images.rows}) != manifest items ({len(manifest.items)})"
        )
    if pool.rows != len(manifest.descriptors):
        raise DataError(
            f"pool rows ({pool.rows}) != manifest descriptors ({len(manifest.descriptors)})"
        )
    if pool.rows > 0 and images.dim != pool.dim:
        raise DataError(f"image dim {images.dim} != descriptor dim {pool.dim}")
    splits = {name: manifest.split_indices(name) for name in ("train", "val", "test")}
    return Dataset(images, pool, manifest, images.as_f64(), pool.as_f64(),
                   manifest.labels(), splits)


def cmd_train_score(cfg: PipelineConfig) -> dict:
    data = load_dataset(cfg)
    out = Path(cfg.out_dir)
    net, losses = train_score(data.images, data.pool, cfg.score, checkpoint_dir=out)
    return {
        "checkpoint": str(out / "score.clnn"),
        "epochs": len(losses),
        "final_loss": losses[-1] if losses else None,
        "losses": losses,
    }


def _load_score_if_needed(cfg: PipelineConfig):
    path = Path(cfg.out_dir) / "score.clnn"
    needed = cfg.approx.regularizer == "sm" and cfg.approx.lam > 0
    if path.exists():
        return load_score_net(path)
    if needed:
        raise DataError(f"score checkpoint {path} not found; run train-score first")
    return None


def cmd_learn(cfg: PipelineConfig) -> dict:
    data = load_dataset(cfg)
    if len(data.splits["train"]) == 0 or len(data.splits["val"]) == 0:
        raise EmptySplitError("manifest must provide non-empty train and val splits")
    net = _load_score_if_needed(cfg)
    result = train_approximation(
        data.x, data.labels, data.splits["train"], data.splits["val"],
        net, cfg.approx, pool=data.pool_x, n_classes=len(data.manifest.classes),
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_bottleneck(result, cfg.approx, out / "bottleneck.clbn")
    return {
        "checkpoint": str(out / "bottleneck.clbn"),
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.best_val_accuracy,
        "val_curve": result.val_curve,
        "loss_curve": result.loss_curve,
    }


def cmd_select(cfg: PipelineConfig) -> dict:
    data = load_dataset(cfg)
    params = load_bottleneck(Path(cfg.out_dir) / "bottleneck.clbn")
    if data.pool.rows < cfg.k:
        raise InfeasibleSelectionError(
            f"pool has {data.pool.rows} descriptors, need at least k={cfg.k}"
        )

    sim = similarity_matrix(params.S, data.pool)
    report: dict = {"method": cfg.selection_method, "m0": cfg.m0, "k": cfg.k}

    if cfg.selection_method == "hungarian":
        filt = top_m_filter(sim, cfg.k, cfg.m0)
        report["final_m"] = filt.final_m
        report["top_des_size"] = filt.top_des_size
        report["filter_skipped"] = filt.skipped
        assignment = assign(filt.matrix)
        chosen: Assignment | list[int] = assignment
        pair_ids = [col for _, col in sorted(assignment.pairs)]
        total = assignment.total_similarity
    elif cfg.selection_method == "nn":
        pair_ids = select_nn(params.S, data.pool)
        chosen = pair_ids
        total = float(sum(sim.values[i, j] for i, j in enumerate(pair_ids)))
    else:
        pair_ids = select_random(data.pool.rows, cfg.k, _stage_seed(cfg.seed, _SEED_SELECT))
        chosen = pair_ids
        total = float(sum(sim.values[i, j] for i, j in enumerate(pair_ids)))

    s_prime, texts = build_selected(data.pool, data.manifest, chosen)
    report["pairs"] = [
        {
            "row": i,
            "pool_index": int(j),
            "similarity": float(sim.values[i, j]),
            "text": texts[i],
        }
        for i, j in enumerate(pair_ids)
    ]
    report["total_similarity"] = total

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(
        EmbeddingSet.from_array(s_prime.T.astype(np.float32)), out / "sprime.cleb"
    )
    (out / "selection.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def cmd_train_head(cfg: PipelineConfig) -> dict:
    data = load_dataset(cfg)
    out = Path(cfg.out_dir)
    selection = json.loads((out / "selection.json").read_text())
    s_prime_set = read_embeddings(out / "sprime.cleb")
    s_prime = s_prime_set.as_f64().T
    texts = [p["text"] for p in selection["pairs"]]
    result = train_head(
        s_prime, texts, list(data.manifest.classes),
        data.x, data.labels, data.splits["train"], data.splits["val"], cfg.head,
    )
    save_model(result, out / "model.clcm", metadata={"selection_method": selection["method"]})
    return {
        "model": str(out / "model.clcm"),
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.best_val_accuracy,
        "val_curve": result.val_curve,
        "loss_curve": result.loss_curve,
    }


def cmd_eval(cfg: PipelineConfig) -> dict:
    data = load_dataset(cfg)
    model = load_model(Path(cfg.out_dir) / "model.clcm")
    test_idx = data.splits["test"]
    if len(test_idx) == 0:
        raise EmptySplitError("manifest has no test items")
    metrics = evaluate(model, data.x[test_idx], data.labels[test_idx])
    out = Path(cfg.out_dir)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics


def cmd_explain(cfg: PipelineConfig, item_ids: list[str]) -> list[dict]:
    data = load_dataset(cfg)
    model = load_model(Path(cfg.out_dir) / "model.clcm")
    index = {item.id: i for i, item in enumerate(data.manifest.items)}
    reports = []
    for item_id in item_ids:
        if item_id not in index:
            raise DataError(f"item id {item_id!r} not in manifest")
        i = index[item_id]
        exp = explain(model, data.x[i])
        reports.append(exp.to_json(model, item_id=item_id, true_label=int(data.labels[i])))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "explanations.json").write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    return reports


_STAGE_ARTIFACTS = {
    "train-score": ("score.clnn", "score.json"),
    "learn": ("bottleneck.clbn", "bottleneck.json"),
    "select": ("selection.json", "sprime.cleb"),
    "train-head": ("model.clcm", "model.json"),
    "eval": ("metrics.json",),
}


def cmd_pipeline(cfg: PipelineConfig) -> dict:
    """Run all stages in order, short-circuiting on failure, and write the
    run report with timings, curves, metrics and content hashes."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report: dict = {
        "config": cfg.raw,
        "inputs": {
            "images": sha256_file(cfg.images),
            "descriptors": sha256_file(cfg.descriptors),
            "manifest": sha256_file(cfg.manifest),
        },
        "stages": [],
    }
    stages = [
        ("train-score", cmd_train_score),
        ("learn", cmd_learn),
        ("select", cmd_select),
        ("train-head", cmd_train_head),
        ("eval", cmd_eval),
    ]
    try:
        for name, fn in stages:
            started = time.monotonic()
            metrics = fn(cfg)
            entry = {
                "name": name,
                "seconds": time.monotonic() - started,
                "artifacts": {
                    f: sha256_file(out / f)
                    for f in _STAGE_ARTIFACTS[name]
                    if (out / f).exists()
                },
            }
            if name == "learn":
                entry["val_curve"] = metrics["val_curve"]
                entry["loss_curve"] = metrics["loss_curve"]
            elif name == "train-score":
                entry["losses"] = metrics["losses"]
            elif name == "select":
                entry["selection"] = metrics
            elif name == "train-head":
                entry["val_curve"] = metrics["val_curve"]
            elif name == "eval":
                entry["metrics"] = metrics
                report["test_accuracy"] = metrics["accuracy"]
            report["stages"].append(entry)
    except Exception as e:
        report["failed_stage"] = stages[len(report["stages"])][0]
        report["error"] = str(e)
        (out / "run_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        raise
    (out / "run_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
