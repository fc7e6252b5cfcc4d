"""Resumable stage runner behind the command-line interface.

A run directory holds::

    manifests/<stage>.json   input/output hashes, config hash, tool version
    artifacts/               stage outputs
    audit/                   LLM transcripts
    report/                  report.md plus plot-ready tables

Stage graph (each stage reads only the artifacts of the stages it names)::

    synth
    ingest -> embed -> train-sae -> interpret
                                 -> analyze        (uses interpret if present)
                                 -> subjectivity -> personalize
                                 -> curate -> elo
    report (reads whatever exists)
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import re
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import yaml
from filelock import FileLock, Timeout

from . import __version__
from . import autointerp, curation, embed_client, preference_stats, sae, subjectivity, synthbench
from .dataset import PreprocessConfig, load_dataset, preprocess, write_jsonl
from .errors import DependencyError, InsufficientDataError, NumericError, ValidationError

logger = logging.getLogger(__name__)

STAGES = ["synth", "ingest", "embed", "train-sae", "interpret", "analyze", "subjectivity",
          "personalize", "curate", "elo", "report"]

UPSTREAM = {
    "synth": [],
    "ingest": [],
    "embed": ["ingest"],
    "train-sae": ["embed"],
    "interpret": ["train-sae"],
    "analyze": ["train-sae"],
    "subjectivity": ["train-sae"],
    "personalize": ["subjectivity"],
    "curate": ["train-sae"],
    "elo": ["curate"],
    "report": [],
}

# Config sections that influence each stage (for the per-stage config hash).
CONFIG_SECTIONS = {
    "synth": ["synth"],
    "ingest": ["dataset", "preprocess"],
    "embed": ["embedding"],
    "train-sae": ["sae"],
    "interpret": ["describer", "judge", "interpret"],
    "analyze": ["analysis"],
    "subjectivity": ["subjectivity"],
    "personalize": ["personalization"],
    "curate": ["curation"],
    "elo": ["curation"],
    "report": ["report"],
}

DEFAULTS: dict[str, Any] = {
    "run_dir": "run",
    "run_id": None,
    "seed": 0,
    "dataset": {"path": None, "format": "jsonl", "word_count_scope": "final_turn", "name": None},
    "preprocess": {"max_token_length": 2048, "swap": True},
    "embedding": {"provider": "http", "base_url": "https://api.openai.com/v1/embeddings",
                  "model_id": "text-embedding-3-small", "dim": 1536, "api_key_env": "OPENAI_API_KEY",
                  "batch_size": 128, "max_in_flight": 8, "max_retries": 5, "include_prompt": False,
                  "cache_dir": None, "table": None, "static_model_id": "synthbench"},
    "sae": {"latent_dim": 32, "k": 4, "matryoshka_prefix": 8, "batch_size": 256,
            "learning_rate": 1e-3, "epochs": 200, "topk_mode": "global"},
    "describer": {"provider": "http", "base_url": "https://api.openai.com/v1/chat/completions",
                  "model": "gpt-4o", "temperature": 0.7, "api_key_env": "OPENAI_API_KEY"},
    "judge": {"provider": "http", "base_url": "https://api.openai.com/v1/chat/completions",
              "model": "gpt-4o-mini", "temperature": 0.0, "api_key_env": "OPENAI_API_KEY"},
    "interpret": {"n_candidates": 5, "n_examples": 5, "n_fidelity": 300, "max_in_flight": 8,
                  "template_dir": None, "features": None},
    "analysis": {"n_boot": 1000, "min_rows": 50, "folds": 5, "l2": 1.0, "nonzero_only": False,
                 "embedding_auc": True},
    "subjectivity": {"min_pairs": 30, "min_pairs_report": 200, "groupings": None, "merge_small": True},
    "personalization": {"ks": [1, 2, 4, 8, 16], "replicates": 20, "heldout_fraction": 0.5,
                        "n_selected": 1, "n_boot": 200},
    "curation": {"feature": None, "n": 1000, "direction": None},
    "report": {"strict": False},
    "synth": {},
}


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

_ENV = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")


def interpolate_env(value, environ: Mapping[str, str] | None = None):
    """Replace ``${VAR}`` / ``${VAR:-default}`` in every string of a nested structure."""
    environ = os.environ if environ is None else environ
    if isinstance(value, str):
        def sub(m):
            name, default = m.group(1), m.group(2)
            if name in environ:
                return environ[name]
            if default is not None:
                return default
            raise ValidationError(f"environment variable {name} is referenced in the config but unset")
        return _ENV.sub(sub, value)
    if isinstance(value, dict):
        return {k: interpolate_env(v, environ) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate_env(v, environ) for v in value]
    return value


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value``; the value is parsed as YAML (so numbers and lists work)."""
    if "=" not in assignment:
        raise ValidationError(f"override {assignment!r} must look like key.path=value")
    key, raw = assignment.split("=", 1)
    value = yaml.safe_load(raw) if raw else None
    node = cfg
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValidationError(f"override {assignment!r} descends into a non-mapping")
    node[parts[-1]] = value
    return cfg


def load_config(path=None, overrides=(), environ=None) -> dict:
    """Defaults, then the YAML file, then ``key=value`` overrides; env vars interpolated."""
    cfg = copy.deepcopy(DEFAULTS)
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ValidationError("config root must be a mapping")
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ValidationError(f"unknown config sections: {sorted(unknown)}")
        cfg = _merge(cfg, loaded)
        base_dir = path.parent
    for o in overrides:
        apply_override(cfg, o)
    cfg = interpolate_env(cfg, environ)
    cfg["_base_dir"] = str(base_dir)
    return cfg


def config_hash(cfg: Mapping, sections=None) -> str:
    keys = sorted(k for k in cfg if not k.startswith("_")) if sections is None else sorted(sections)
    payload = {k: cfg.get(k) for k in keys}
    payload["seed"] = cfg.get("seed")
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# Run directory
# --------------------------------------------------------------------------


@dataclass
class StageResult:
    stage: str
    skipped: bool
    outputs: list[str] = field(default_factory=list)
    notes: dict = field(default_factory=dict)


class Run:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        base = Path(cfg.get("_base_dir", "."))
        root = Path(cfg["run_dir"])
        self.root = root if root.is_absolute() else base / root
        self.hash = config_hash(cfg)
        self.run_id = cfg.get("run_id") or f"run-{self.hash[:10]}"
        for sub in ("manifests", "artifacts", "audit", "report"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(self.root / ".lock"))

    def resolve(self, p) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else Path(self.cfg.get("_base_dir", ".")) / p

    def artifact(self, name: str) -> Path:
        return self.root / "artifacts" / name

    def manifest_path(self, stage: str) -> Path:
        return self.root / "manifests" / f"{stage}.json"

    def manifest(self, stage: str) -> dict | None:
        p = self.manifest_path(stage)
        return json.loads(p.read_text(encoding="utf-8")) if p.exists() else None

    def stage_hash(self, stage: str) -> str:
        return config_hash(self.cfg, CONFIG_SECTIONS[stage])

    def stamp(self) -> dict:
        return {"run_id": self.run_id, "config_hash": self.hash}

    def header(self) -> str:
        return f"run_id={self.run_id} config_hash={self.hash}"


def write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=1, default=_json_default), encoding="utf-8")
    tmp.replace(path)
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)
    return path


def save_latents(path: Path, ids, Z, run: Run) -> Path:
    tmp = path.with_name(path.stem + ".tmp.npz")
    np.savez(tmp, ids=np.array(ids), Z=Z, run_id=np.array(run.run_id), config_hash=np.array(run.hash))
    tmp.replace(path)
    return path


def load_latents(path: Path) -> tuple[list[str], np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        return [str(i) for i in data["ids"]], data["Z"]


# --------------------------------------------------------------------------
# Stage helpers
# --------------------------------------------------------------------------


def _require(run: Run, stage: str, needed: str):
    if run.manifest(needed) is None:
        raise DependencyError(f"stage {stage!r} needs the outputs of {needed!r}; run `prefscope {needed}` first")


def _inputs_of(run: Run, stage: str) -> dict[str, str]:
    """Hashes of the upstream outputs this stage consumes."""
    out = {}
    for up in UPSTREAM[stage]:
        m = run.manifest(up)
        if m:
            out.update(m.get("outputs", {}))
    return out


def _dataset(run: Run):
    return load_dataset(run.artifact("dataset.jsonl"))


def _latents(run: Run, d):
    ids, Z = load_latents(run.artifact("latents.npz"))
    if ids != d.ids:
        raise ValidationError("latent rows do not match the dataset; rerun train-sae")
    return Z


def _llm(section: Mapping):
    provider = section.get("provider", "http")
    if provider == "marker":
        return synthbench.MarkerLLM()
    if provider == "coin":
        return synthbench.CoinJudge(seed=int(section.get("seed", 0)))
    if provider == "http":
        known = {f.name for f in fields(autointerp.ChatConfig)}
        cfg = autointerp.ChatConfig(**{k: v for k, v in section.items() if k in known})
        return autointerp.HttpChatClient(cfg)
    raise ValidationError(f"unknown LLM provider {provider!r}")


def _features_for_analysis(run: Run, M: int) -> tuple[list[int], dict[int, str], bool]:
    """Significant described features if interpretation ran, else every latent."""
    path = run.artifact("features.json")
    if path.exists():
        fds = autointerp.read_features_json(path)
        desc = {fd.feature_id: fd.text for fd in fds}
        sig = [fd.feature_id for fd in fds if fd.significant]
        return sig, desc, True
    logger.warning("no features.json; analysing all %d latents without descriptions", M)
    return list(range(M)), {}, False


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def stage_synth(run: Run) -> dict:
    opts = dict(run.cfg.get("synth") or {})
    opts.setdefault("seed", run.cfg["seed"])
    known = {f.name for f in fields(synthbench.PlantedSpec)}
    unknown = set(opts) - known
    if unknown:
        raise ValidationError(f"unknown synth options {sorted(unknown)}")
    for key in ("magnitude_range",):
        if key in opts:
            opts[key] = tuple(opts[key])
    spec = synthbench.PlantedSpec(**opts)
    d, _, gt = synthbench.generate(spec)
    d = d.replace(provenance={**d.provenance, **run.stamp()})
    paths = synthbench.write_synth(run.artifact("synth"), d, gt, spec)
    return {"outputs": list(paths.values()), "notes": {"n_pairs": len(d)}}


def dataset_source(run: Run) -> Path:
    path = run.resolve(run.cfg["dataset"].get("path"))
    if path is None:
        path = run.artifact("synth") / "dataset.jsonl"
        if not path.exists():
            raise DependencyError("dataset.path is unset and no synth output exists; "
                                  "run `prefscope synth` or set dataset.path")
    if not path.exists():
        raise ValidationError(f"dataset file not found: {path}")
    return path


def stage_ingest(run: Run) -> dict:
    dcfg = run.cfg["dataset"]
    path = dataset_source(run)
    d = load_dataset(path, dcfg.get("format", "jsonl"), name=dcfg.get("name"),
                     word_count_scope=dcfg.get("word_count_scope", "final_turn"))
    pcfg = run.cfg["preprocess"]
    d = preprocess(d, PreprocessConfig(max_token_length=pcfg.get("max_token_length", 2048),
                                       swap_seed=run.cfg["seed"], swap=pcfg.get("swap", True)))
    d = d.replace(provenance={**d.provenance, **run.stamp()})
    out = write_jsonl(d, run.artifact("dataset.jsonl"))
    return {"outputs": [out, out.with_name(out.name + ".meta.json")],
            "inputs": {str(path): file_hash(path)},
            "notes": {"n_pairs": len(d), "n_labeled": int(d.labeled_mask().sum())}}


def _embedding_provider(run: Run):
    ecfg = run.cfg["embedding"]
    provider = ecfg.get("provider", "http")
    if provider == "static":
        table = run.resolve(ecfg.get("table")) or run.artifact("synth") / "embeddings.npz"
        if not table.exists():
            raise DependencyError(f"static embedding table {table} not found; run `prefscope synth` first")
        return synthbench.load_embedding_table(table, model_id=ecfg.get("static_model_id") or "synthbench")
    if provider == "http":
        known = {f.name for f in fields(embed_client.ProviderConfig)}
        pc = embed_client.ProviderConfig(**{k: v for k, v in ecfg.items() if k in known})
        return embed_client.HttpEmbeddingProvider(pc)
    raise ValidationError(f"unknown embedding provider {provider!r}")


def stage_embed(run: Run) -> dict:
    ecfg = run.cfg["embedding"]
    d = _dataset(run)
    provider = _embedding_provider(run)
    cache_dir = run.resolve(ecfg.get("cache_dir")) or run.root / "cache" / "embeddings"
    cache = embed_client.EmbeddingCache(cache_dir)
    texts_a, texts_b = embed_client.pair_texts(d, ecfg.get("include_prompt", False))
    unique = set(texts_a + texts_b)
    hits = sum((provider.model_id, t) in cache for t in unique)
    diffs = embed_client.compute_diffs(d, provider, cache, include_prompt=ecfg.get("include_prompt", False),
                                       batch_size=ecfg.get("batch_size", 128),
                                       max_in_flight=ecfg.get("max_in_flight", 8))
    out = embed_client.save_diffs(diffs, run.artifact("diffs.npz"))
    return {"outputs": [out], "notes": {"unique_texts": len(unique), "cache_hits": hits,
                                        "provider_requests": getattr(provider, "n_requests", None),
                                        "model_id": provider.model_id, "normalization": "none",
                                        "include_prompt": bool(ecfg.get("include_prompt", False))}}


def stage_train_sae(run: Run) -> dict:
    diffs = embed_client.load_diffs(run.artifact("diffs.npz"))
    X = embed_client.diff_matrix(diffs)
    scfg = dict(run.cfg["sae"])
    cfg = sae.SaeConfig(input_dim=X.shape[1], seed=run.cfg["seed"],
                        **{k: v for k, v in scfg.items() if k in {f.name for f in fields(sae.SaeConfig)}})
    model = sae.train(X, cfg)
    model.metadata.update(run.stamp())
    ckpt = sae.save_checkpoint(model, run.artifact("sae.json"))
    Z = sae.transform(X, model)
    lat = save_latents(run.artifact("latents.npz"), [r.pair_id for r in diffs], Z, run)
    return {"outputs": [ckpt, lat], "notes": {"final_loss": model.train_loss_trace[-1], "theta": model.theta,
                                              "mean_nonzero": float((Z != 0).sum(axis=1).mean())}}


def stage_interpret(run: Run) -> dict:
    d = _dataset(run)
    Z = _latents(run, d)
    icfg = run.cfg["interpret"]
    audit = autointerp.AuditLog(run.root / "audit", run.run_id)
    fds = autointerp.interpret_features(
        Z, d, _llm(run.cfg["describer"]), _llm(run.cfg["judge"]),
        features=icfg.get("features"), n_candidates=icfg["n_candidates"], n_examples=icfg["n_examples"],
        n_fidelity=icfg["n_fidelity"], seed=run.cfg["seed"], audit=audit,
        max_in_flight=icfg.get("max_in_flight", 1), template_dir=run.resolve(icfg.get("template_dir")),
    )
    out = autointerp.write_features_json(fds, run.artifact("features.json"), **run.stamp(),
                                         n_features=int(Z.shape[1]))
    return {"outputs": [out], "notes": {"n_described": len(fds),
                                        "n_significant": sum(fd.significant for fd in fds)}}


def stage_analyze(run: Run) -> dict:
    d = _dataset(run)
    Z = _latents(run, d)
    acfg = run.cfg["analysis"]
    mask = d.labeled_mask()
    Zl, y, ld = Z[mask], d.labels(), d.length_deltas()[mask]
    feats, desc, described = _features_for_analysis(run, Z.shape[1])
    effects = preference_stats.feature_effects(Zl, y, ld, features=feats, n_boot=acfg["n_boot"],
                                               min_rows=acfg["min_rows"], seed=run.cfg["seed"],
                                               nonzero_only=acfg.get("nonzero_only", False))
    # prevalence is over all pairs, not only labeled ones
    for e in effects:
        e.prevalence = float(np.mean(Z[:, e.feature_id] != 0))
    rows = preference_stats.effects_rows(effects, desc, n_tests=max(1, sum(e.ok for e in effects)))
    out_csv = preference_stats.write_csv(rows, run.artifact("effects.csv"), preference_stats.EFFECT_COLUMNS,
                                         run.header())
    aucs: dict[str, Any] = {**run.stamp(), "features_described": described}
    aucs["sparse_auc"] = preference_stats.sparse_auc(Zl, y, ld, folds=acfg["folds"], seed=run.cfg["seed"],
                                                     l2=acfg["l2"])
    if acfg.get("embedding_auc", True):
        E = embed_client.diff_matrix(embed_client.load_diffs(run.artifact("diffs.npz")))[mask]
        aucs["embedding_auc"] = preference_stats.embedding_auc(E, y, ld, folds=acfg["folds"],
                                                               seed=run.cfg["seed"], l2=acfg["l2"])
        gain = aucs["embedding_auc"] - 0.5
        aucs["fraction_of_gain"] = (aucs["sparse_auc"] - 0.5) / gain if gain > 0 else None
    out_auc = write_json(run.artifact("auc.json"), aucs)
    return {"outputs": [out_csv, out_auc], "notes": {"n_features": len(effects)}}


SUBJECTIVITY_COLUMNS = ["feature_id", "description", "beta_mean", "tau_reml", "tau_pm", "n_annotators",
                        "fraction_reversed"]
LRT_COLUMNS = ["grouping", "feature_id", "description", "statistic", "df", "p_raw", "p_bonferroni"]
PERSONALIZATION_COLUMNS = ["k", "sampling_mode", "auc_global", "auc_personalized", "ci_lo", "ci_hi",
                           "n_annotators"]


def _demographic_keys(d) -> list[str]:
    keys = set()
    for p in d.pairs:
        if p.demographics:
            keys.update(p.demographics)
    return sorted(keys)


def stage_subjectivity(run: Run) -> dict:
    d = _dataset(run)
    Z = _latents(run, d)
    scfg = run.cfg["subjectivity"]
    feats, desc, _ = _features_for_analysis(run, Z.shape[1])
    rows = []
    for j in feats:
        try:
            slopes = subjectivity.per_annotator_slopes(j, d, Z, min_pairs=scfg["min_pairs"])
        except (ValidationError, NumericError) as exc:
            logger.warning("feature %d: %s", j, exc)
            continue
        if len(slopes) < 3:
            logger.warning("feature %d: %d annotator slopes, need 3", j, len(slopes))
            continue
        reml = subjectivity.pool_random_effects(slopes, subjectivity.REML)
        pm = subjectivity.pool_random_effects(slopes, subjectivity.PAULE_MANDEL)
        rows.append({"feature_id": j, "description": desc.get(j, ""), "beta_mean": reml.beta_mean,
                     "tau_reml": reml.tau, "tau_pm": pm.tau, "n_annotators": reml.n_annotators,
                     "fraction_reversed": subjectivity.fraction_reversed(reml)})
    out = [preference_stats.write_csv(rows, run.artifact("subjectivity.csv"), SUBJECTIVITY_COLUMNS,
                                      run.header())]
    groupings = scfg.get("groupings")
    if groupings is None:
        groupings = _demographic_keys(d)
    lrt_rows = []
    for g in groupings:
        results = []
        for j in feats:
            try:
                results.append(subjectivity.subgroup_lrt(j, d, Z, g, min_pairs=scfg["min_pairs"],
                                                         merge_small=scfg.get("merge_small", True)))
            except (InsufficientDataError, NumericError) as exc:
                logger.warning("LRT %s feature %d skipped: %s", g, j, exc)
        for r in results:
            lrt_rows.append({"grouping": g, "feature_id": r.feature_id, "description": desc.get(r.feature_id, ""),
                             "statistic": r.statistic, "df": r.df, "p_raw": r.p_value,
                             "p_bonferroni": r.p_bonferroni(len(results))})
    out.append(preference_stats.write_csv(lrt_rows, run.artifact("lrt.csv"), LRT_COLUMNS, run.header()))
    return {"outputs": out, "notes": {"n_features": len(rows), "groupings": list(groupings)}}


def _read_csv(path: Path) -> list[dict]:
    with path.open(encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def stage_personalize(run: Run) -> dict:
    d = _dataset(run)
    Z = _latents(run, d)
    pcfg = run.cfg["personalization"]
    subj = _read_csv(run.artifact("subjectivity.csv"))
    subj = [r for r in subj if float(r["tau_reml"]) > 0]
    if not subj:
        raise InsufficientDataError("no feature has positive between-annotator variance; nothing to personalize")
    subj.sort(key=lambda r: (-float(r["tau_reml"]), int(r["feature_id"])))
    chosen = subj[: pcfg["n_selected"]]
    selected = [int(r["feature_id"]) for r in chosen]
    tau2 = [float(r["tau_reml"]) ** 2 for r in chosen]
    g = subjectivity.fit_global(d, Z)
    selected = [f for f in selected if f in g.features]
    rows = subjectivity.evaluate_personalization(
        d, Z, g, selected, tau2[: len(selected)], ks=pcfg["ks"], replicates=pcfg["replicates"],
        heldout_fraction=pcfg["heldout_fraction"], n_boot=pcfg["n_boot"], seed=run.cfg["seed"])
    out = preference_stats.write_csv([asdict(r) for r in rows], run.artifact("personalization_report.csv"),
                                     PERSONALIZATION_COLUMNS, run.header())
    return {"outputs": [out], "notes": {"selected": selected, "tau2": tau2,
                                        "global_annotators": len(g.annotators)}}


def _curation_options(run: Run) -> tuple[int, int, int]:
    c = run.cfg["curation"]
    if c.get("feature") is None:
        raise ValidationError("curation.feature is required (set it in the config or pass --feature)")
    if c.get("direction") not in (1, -1, "+1", "-1", "+", "-"):
        raise ValidationError("curation.direction must be +1 or -1 (pass --direction); refusing to guess the harmful sign")
    direction = 1 if str(c["direction"]).startswith("+") or c["direction"] == 1 else -1
    return int(c["feature"]), int(c["n"]), direction


def stage_curate(run: Run) -> dict:
    d = _dataset(run)
    Z = _latents(run, d)
    j, n, direction = _curation_options(run)
    ids = curation.flag_for_flip(d, Z, j, n, direction)
    curated = curation.flip_labels(d, ids, feature_id=j, Z=Z)
    curated = curated.replace(provenance={**curated.provenance, **run.stamp()})
    out = curation.export_curated(curated, run.artifact("curated.jsonl"))
    pre = curated.provenance["flips"][-1]["pre_flip_labels"] if ids else {}
    return {"outputs": [out], "notes": {"feature": j, "direction": direction, "n_flipped": len(ids),
                                        "pre_flip_labels": pre}}


def stage_elo(run: Run) -> dict:
    base_d = _dataset(run)
    cur_d = load_dataset(run.artifact("curated.jsonl"))
    base_m, excluded = curation.matches_from_dataset(base_d)
    adj_m, _ = curation.matches_from_dataset(cur_d)
    if not base_m:
        raise InsufficientDataError("no pairs carry model identities; Elo needs model_a/model_b")
    base = curation.compute_elo(base_m, allow_disconnected=True)
    adj = curation.compute_elo(adj_m, allow_disconnected=True)
    comp = curation.EloComparison(base, adj, {m: adj.ratings[m] - base.ratings[m] for m in base.ratings},
                                  [], excluded)
    out = preference_stats.write_csv(comp.rows(), run.artifact("elo.csv"), curation.ELO_COLUMNS, run.header())
    return {"outputs": [out], "notes": {"n_matches": len(base_m), "n_excluded": excluded,
                                        "anchors": base.anchors}}


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------


def significance_class(p_adjusted: float, beta: float) -> str:
    if not np.isfinite(p_adjusted) or p_adjusted >= 0.05:
        return "not signif."
    return "preferred" if beta > 0 else "dispreferred"


def _fmt(x, spec=".3f") -> str:
    try:
        v = float(x)
    except (TypeError, ValueError):
        return str(x)
    return "n/a" if not math.isfinite(v) else format(v, spec)


def stage_report(run: Run) -> dict:
    parts = [f"# Preference analysis report\n\n`{run.header()}`\n"]
    gaps = []
    figures = []

    def gap(section, stage):
        gaps.append(section)
        parts.append(f"_Not available: run `prefscope {stage}`._\n")

    ds = run.artifact("dataset.jsonl")
    parts.append("\n## Dataset\n\n")
    if ds.exists():
        d = load_dataset(ds)
        parts.append(f"- pairs: {len(d)}\n- labeled (A/B): {int(d.labeled_mask().sum())}\n"
                     f"- annotators: {len({p.annotator_id for p in d.pairs if p.annotator_id})}\n")
    else:
        gap("dataset", "ingest")

    parts.append("\n## Measurable preferences\n\n")
    fj = run.artifact("features.json")
    if fj.exists():
        fds = autointerp.read_features_json(fj)
        parts.append("| feature | description | fidelity | p | significant |\n|---|---|---|---|---|\n")
        for fd in sorted(fds, key=lambda f: (not f.significant, -(f.fidelity if math.isfinite(f.fidelity) else -9))):
            parts.append(f"| {fd.feature_id} | {fd.text} | {_fmt(fd.fidelity)} | {_fmt(fd.p_value, '.2g')} "
                         f"| {'yes' if fd.significant else 'no'} |\n")
    else:
        gap("measurable preferences", "interpret")

    parts.append("\n## Expressed preferences\n\n")
    ec = run.artifact("effects.csv")
    if ec.exists():
        rows = _read_csv(ec)
        for r in rows:
            r["class"] = significance_class(float(r["p_adjusted"]), float(r["beta"]))
        rows.sort(key=lambda r: -float(r["delta_winrate"]) if math.isfinite(float(r["delta_winrate"])) else 9)
        parts.append("| concept | Δwin | prevalence | significance |\n|---|---|---|---|\n")
        for r in rows:
            concept = r["description"] or f"feature {r['feature_id']}"
            parts.append(f"| {concept} | {_fmt(100 * float(r['delta_winrate']), '+.0f')}% "
                         f"| {_fmt(100 * float(r['prevalence']), '.0f')}% | {r['class']} |\n")
        parts.append("\nSignificance is Bonferroni-adjusted at 0.05 across the tested features.\n")
        dot = [{"feature_id": r["feature_id"], "concept": r["description"], "delta_winrate": r["delta_winrate"],
                "ci_lo": r["ci_lo"], "ci_hi": r["ci_hi"], "prevalence": r["prevalence"], "class": r["class"]}
               for r in rows]
        figures.append(preference_stats.write_csv(
            dot, run.root / "report" / "dotplot.csv",
            ["feature_id", "concept", "delta_winrate", "ci_lo", "ci_hi", "prevalence", "class"], run.header()))
    else:
        gap("expressed preferences", "analyze")

    parts.append("\n## Prediction quality\n\n")
    aj = run.artifact("auc.json")
    if aj.exists():
        a = json.loads(aj.read_text(encoding="utf-8"))
        parts.append(f"- sparse-feature model AUC: {_fmt(a.get('sparse_auc'))}\n")
        if "embedding_auc" in a:
            parts.append(f"- dense-embedding model AUC: {_fmt(a['embedding_auc'])}\n")
            parts.append(f"- share of the dense model's gain over 0.5: {_fmt(a.get('fraction_of_gain'), '.1%')}\n")
    else:
        gap("prediction quality", "analyze")

    parts.append("\n## Subjectivity\n\n")
    sc = run.artifact("subjectivity.csv")
    if sc.exists():
        rows = sorted(_read_csv(sc), key=lambda r: -float(r["tau_reml"]))
        parts.append("| concept | β | τ (REML) | τ (PM) | annotators | reversed |\n|---|---|---|---|---|---|\n")
        for r in rows:
            concept = r["description"] or f"feature {r['feature_id']}"
            parts.append(f"| {concept} | {_fmt(r['beta_mean'], '+.2f')} | {_fmt(r['tau_reml'], '.2f')} "
                         f"| {_fmt(r['tau_pm'], '.2f')} | {r['n_annotators']} "
                         f"| {_fmt(100 * float(r['fraction_reversed']), '.0f')}% |\n")
        lc = run.artifact("lrt.csv")
        lrows = _read_csv(lc) if lc.exists() else []
        if lrows:
            parts.append("\n| grouping | concept | p | p (Bonferroni) |\n|---|---|---|---|\n")
            for r in sorted(lrows, key=lambda r: float(r["p_raw"])):
                concept = r["description"] or f"feature {r['feature_id']}"
                parts.append(f"| {r['grouping']} | {concept} | {_fmt(r['p_raw'], '.2g')} "
                             f"| {_fmt(r['p_bonferroni'], '.2g')} |\n")
        else:
            parts.append("\nNo demographic groupings were tested.\n")
    else:
        gap("subjectivity", "subjectivity")

    parts.append("\n## Personalization\n\n")
    pc = run.artifact("personalization_report.csv")
    if pc.exists():
        rows = _read_csv(pc)
        parts.append("| k | sampling | global AUC | personalized AUC | 95% CI |\n|---|---|---|---|---|\n")
        for r in rows:
            parts.append(f"| {r['k']} | {r['sampling_mode']} | {_fmt(r['auc_global'], '.4f')} "
                         f"| {_fmt(r['auc_personalized'], '.4f')} | [{_fmt(r['ci_lo'], '.4f')}, "
                         f"{_fmt(r['ci_hi'], '.4f')}] |\n")
        figures.append(preference_stats.write_csv(rows, run.root / "report" / "personalization_curve.csv",
                                                  PERSONALIZATION_COLUMNS, run.header()))
    else:
        gap("personalization", "personalize")

    parts.append("\n## Curation and leaderboard\n\n")
    el = run.artifact("elo.csv")
    if el.exists():
        rows = _read_csv(el)
        cm = run.manifest("curate") or {}
        notes = cm.get("notes", {})
        parts.append(f"Flipped {notes.get('n_flipped', '?')} labels on feature {notes.get('feature', '?')} "
                     f"(direction {notes.get('direction', '?')}).\n\n")
        parts.append("| model | base | adjusted | Δ | Δrank |\n|---|---|---|---|---|\n")
        for r in rows:
            drank = int(r["base_rank"]) - int(r["adjusted_rank"])
            parts.append(f"| {r['model']} | {_fmt(r['base_rating'], '.1f')} | {_fmt(r['adjusted_rating'], '.1f')} "
                         f"| {_fmt(r['delta'], '+.1f')} | {drank:+d} |\n")
        figures.append(preference_stats.write_csv(rows, run.root / "report" / "elo.csv", curation.ELO_COLUMNS,
                                                  run.header()))
    else:
        gap("curation and leaderboard", "elo")

    if gaps:
        parts.append(f"\n## Gaps\n\nMissing sections: {', '.join(gaps)}.\n")
    out = write_text(run.root / "report" / "report.md", "".join(parts))
    return {"outputs": [out, *figures], "notes": {"gaps": gaps}, "always_run": True}


STAGE_FUNCS: dict[str, Callable[[Run], dict]] = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "embed": stage_embed,
    "train-sae": stage_train_sae,
    "interpret": stage_interpret,
    "analyze": stage_analyze,
    "subjectivity": stage_subjectivity,
    "personalize": stage_personalize,
    "curate": stage_curate,
    "elo": stage_elo,
    "report": stage_report,
}


class ReportGaps(ValidationError):
    """The report was written but some sections are missing."""


def run_stage(stage: str, cfg: dict, *, force: bool = False, strict_stale: bool = False) -> StageResult:
    """Run one stage under the run-directory lock; a no-op when inputs and config are unchanged."""
    if stage not in STAGE_FUNCS:
        raise ValidationError(f"unknown stage {stage!r}; choose from {STAGES}")
    run = Run(cfg)
    try:
        run.lock.acquire(timeout=0)
    except Timeout:
        raise ValidationError(f"run directory {run.root} is locked by another stage") from None
    try:
        for up in UPSTREAM[stage]:
            _require(run, stage, up)
        inputs = _inputs_of(run, stage)
        if stage == "ingest":
            src = dataset_source(run)
            inputs[str(src)] = file_hash(src)
        prev = run.manifest(stage)
        stage_hash = run.stage_hash(stage)
        if prev is not None and stage != "report":
            fresh = (prev.get("stage_config_hash") == stage_hash and prev.get("upstream") == inputs
                     and all(Path(run.root / p).exists() for p in prev.get("outputs", {})))
            if fresh and not force:
                logger.info("%s: up to date, skipping (use --force to rerun)", stage)
                return StageResult(stage, True, list(prev.get("outputs", {})), prev.get("notes", {}))
            if not fresh:
                if strict_stale:
                    raise DependencyError(f"stage {stage!r} artifacts are stale relative to config or upstream")
                logger.warning("%s: artifacts stale relative to config or upstream; recomputing", stage)
        t0 = time.perf_counter()
        result = STAGE_FUNCS[stage](run)
        outputs = {str(Path(p).relative_to(run.root)): file_hash(p) for p in result["outputs"]}
        manifest = {
            "stage": stage,
            **run.stamp(),
            "stage_config_hash": stage_hash,
            "tool_version": __version__,
            "seed": run.cfg["seed"],
            "upstream": inputs,
            "inputs": result.get("inputs", {}),
            "outputs": outputs,
            "notes": result.get("notes", {}),
            "seconds": round(time.perf_counter() - t0, 3),
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        write_json(run.manifest_path(stage), manifest)
        res = StageResult(stage, False, list(outputs), manifest["notes"])
        if stage == "report" and result["notes"].get("gaps") and cfg["report"].get("strict"):
            raise ReportGaps(f"report written with gaps: {result['notes']['gaps']}")
        return res
    finally:
        run.lock.release()


PIPELINE = ["ingest", "embed", "train-sae", "interpret", "analyze", "subjectivity", "personalize",
            "curate", "elo", "report"]


def run_all(cfg: dict, *, force: bool = False, with_synth: bool = False) -> list[StageResult]:
    """Every stage in order; curation and Elo are skipped when no curation feature is configured."""
    stages = (["synth"] if with_synth else []) + PIPELINE
    results = []
    for s in stages:
        if s in ("curate", "elo") and cfg["curation"].get("feature") is None:
            logger.info("skipping %s: no curation.feature configured", s)
            continue
        results.append(run_stage(s, cfg, force=force))
    return results
