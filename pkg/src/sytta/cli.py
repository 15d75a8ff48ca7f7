"""Command-line entry point.

Configuration is a flat key/value file with dotted keys, written either as
INI sections (``[adapt]`` then ``k = 4``) or as bare ``adapt.k = 4`` lines.
``--set key=value`` flags override the file. Values are parsed as JSON when
possible and kept as strings otherwise.

    python -m sytta.cli adapt --config run.ini --set adapt.k=8 --out runs/a
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .corpus import DomainSpec, generate_cohort, generate_pairs, read_cohort_jsonl, write_cohort_jsonl, write_pairs_jsonl
from .engine import COMPARE_ROWS, AdaptConfig, adapt_cohort, AdaptConfigError, NumericalError, run_cohort_protocol, strategy_config
from .lm import LmConfig, ModelState, load_checkpoint, save_checkpoint
from .metrics import decode_with_entropies, profile_from_entropies, write_profile_csv
from .objectives import GateConfig, ObjectiveConfigError
from .pretrain import PretrainConfig, pretrain
from .weighting import DiwConfig, WeightingConfigError, write_trajectory_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("sytta")


class ConfigError(ValueError):
    """Malformed configuration; the message names the offending key."""


def default_checkpoint() -> Path:
    return Path(str(resources.files("sytta") / "data" / "base_lm.bin"))


@dataclass(frozen=True)
class RunConfig:
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    domains: tuple = (DomainSpec("agri"),)
    cohort_seeds: tuple = (0,)
    checkpoint: str = ""
    out_dir: str = "runs"
    seed: int = 0
    max_pos: int = 64
    strategies: tuple = COMPARE_ROWS
    workers: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domains"] = [asdict(s) for s in self.domains]
        return d


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        low = raw.lower()
        if low in ("true", "false"):
            return low == "true"
        return raw


def read_config_file(path) -> dict[str, object]:
    """Dotted key -> parsed value from an INI-style or bare key=value file."""
    text = Path(path).read_text(encoding="utf-8")
    parser = configparser.ConfigParser(default_section="__defaults__", interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[__root__]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            dotted = key if section == "__root__" else f"{section}.{key}"
            out[dotted] = _parse_value(raw)
    return out


def parse_overrides(pairs) -> dict[str, object]:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = _parse_value(raw)
    return out


_RUN_KEYS = {"checkpoint", "out_dir", "seed", "max_pos", "workers", "strategies", "cohort_seeds"}


def _build(cls, values: dict, prefix: str, base=None):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {prefix}.{key}")
        kwargs[key] = val
    try:
        obj = base if base is not None else cls()
        return replace(obj, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix}: {exc}") from exc


def resolve_config(values: dict) -> RunConfig:
    """Assemble a RunConfig from dotted keys (file values already merged with overrides)."""
    grouped: dict[str, dict] = {k: {} for k in ("adapt", "adapt.gate", "adapt.diw", "lm", "pretrain")}
    run, domain = {}, {}
    for key, val in values.items():
        head, _, rest = key.rpartition(".")
        if head in grouped:
            grouped[head][rest] = val
        elif head == "domain":
            domain[rest] = val
        elif head in ("", "run") and rest in _RUN_KEYS:
            run[rest] = val
        else:
            raise ConfigError(f"unknown config key {key}")
    gate = _build(GateConfig, grouped["adapt.gate"], "adapt.gate")
    diw = _build(DiwConfig, grouped["adapt.diw"], "adapt.diw")
    adapt_vals = dict(grouped["adapt"])
    if "weight_override" in adapt_vals and adapt_vals["weight_override"] is not None:
        adapt_vals["weight_override"] = tuple(adapt_vals["weight_override"])
    adapt = _build(AdaptConfig, {**adapt_vals, "gate": gate, "diw": diw}, "adapt")
    lm = _build(LmConfig, grouped["lm"], "lm")
    pre = _build(PretrainConfig, grouped["pretrain"], "pretrain")

    names = domain.pop("names", domain.pop("name", "agri"))
    if isinstance(names, str):
        names = [n.strip() for n in names.split(",") if n.strip()]
    for key in domain:
        if key not in ("lexicon_shift", "template_novelty", "size"):
            raise ConfigError(f"unknown config key domain.{key}")
    try:
        domains = tuple(DomainSpec(n, **domain) for n in names)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"domain: {exc}") from exc

    seed = int(run.get("seed", 0))
    if "seed" not in grouped["adapt"]:
        adapt = replace(adapt, seed=seed)
    seeds = run.get("cohort_seeds", [seed])
    if isinstance(seeds, int):
        seeds = [seeds]
    strategies = run.get("strategies", list(COMPARE_ROWS))
    if isinstance(strategies, str):
        strategies = [s.strip() for s in strategies.split(",") if s.strip()]
    for s in strategies:
        if s not in COMPARE_ROWS:
            raise ConfigError(f"strategies: unknown row {s!r}; known {list(COMPARE_ROWS)}")
    if len(set(strategies)) != len(strategies):
        raise ConfigError("strategies: duplicate rows")
    return RunConfig(adapt=adapt, lm=lm, pretrain=pre, domains=domains,
                     cohort_seeds=tuple(int(s) for s in seeds),
                     checkpoint=str(run.get("checkpoint", "")), out_dir=str(run.get("out_dir", "runs")),
                     seed=seed, max_pos=int(run.get("max_pos", 64)),
                     strategies=tuple(strategies), workers=int(run.get("workers", 1)))


def load_run_config(path=None, overrides=None) -> RunConfig:
    values = read_config_file(path) if path else {}
    values.update(parse_overrides(overrides))
    return resolve_config(values)


# ---------------------------------------------------------------------------
# commands


def _load_base(cfg: RunConfig) -> ModelState:
    path = Path(cfg.checkpoint) if cfg.checkpoint else default_checkpoint()
    if not path.exists():
        raise ConfigError(f"checkpoint: file not found: {path}")
    return load_checkpoint(path)


def _cohorts(cfg: RunConfig):
    cohorts, refs = [], {}
    for spec in cfg.domains:
        for s in cfg.cohort_seeds:
            c, r = generate_cohort(spec, s)
            cohorts.append(c)
            refs[c.cohort_id] = r
    return cohorts, refs


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def cmd_pretrain(cfg: RunConfig, out: Path) -> Path:
    state, losses = pretrain(cfg.lm, replace(cfg.pretrain, seed=cfg.pretrain.seed))
    path = out / "base_lm.bin"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, path, extra={"run_config": cfg.to_dict(), "final_loss": losses[-1]})
    log.info("saved %s (checksum %s)", path, state.checksum()[:16])
    return path


def cmd_gen_corpus(cfg: RunConfig, out: Path) -> list[Path]:
    written = []
    for spec in cfg.domains:
        for s in cfg.cohort_seeds:
            pairs = generate_pairs(spec, s)
            cohort, _ = generate_cohort(spec, s)
            qa = out / f"{cohort.cohort_id}.qa.jsonl"
            qs = out / f"{cohort.cohort_id}.questions.jsonl"
            write_pairs_jsonl(pairs, qa)
            write_cohort_jsonl(cohort, qs)
            written += [qa, qs]
    _write_json(out / "corpus_config.json", cfg.to_dict())
    return written


def cmd_adapt(cfg: RunConfig, out: Path, cohort_file=None) -> list:
    base = _load_base(cfg)
    if cohort_file:
        cohorts, refs = [read_cohort_jsonl(cohort_file)], None
    else:
        cohorts, refs = _cohorts(cfg)
    runlogs = []
    reports = run_cohort_protocol(base, cohorts, cfg.adapt, refs, workers=cfg.workers, runlogs=runlogs)
    resolved = cfg.to_dict()
    logs = {r.cohort_id: r for r in runlogs}
    for rep in reports:
        d = rep.to_dict()
        d["run_config"] = resolved
        _write_json(out / f"{rep.cohort_id}.report.json", d)
        rl = logs.get(rep.cohort_id)
        if rl is not None:
            rl.write_jsonl(out / f"{rep.cohort_id}.runlog.jsonl")
            write_trajectory_csv(rl.diw_rows(), out / f"{rep.cohort_id}.diw.csv")
    numeric = [r for r in reports if r.error and r.error.startswith("NumericalError")]
    if numeric:
        raise NumericalError("; ".join(f"{r.cohort_id}: {r.error}" for r in numeric))
    return reports


def cmd_profile_entropy(cfg: RunConfig, out: Path, adapted: bool = False) -> Path:
    """Per-position mean response entropy over every configured cohort's queries.

    With ``adapted`` the model is first adapted on each cohort with the
    configured strategy; otherwise the frozen base model is profiled.
    """
    base = _load_base(cfg)
    cohorts, _ = _cohorts(cfg)
    per_response = []
    for c in cohorts:
        state = adapt_cohort(base, c, cfg.adapt)[0] if adapted else base
        per_response += [decode_with_entropies(state, x, cfg.max_pos, use_adapters=adapted)[1]
                         for x in c.queries]
    profile = profile_from_entropies(per_response)
    path = out / ("entropy_profile_adapted.csv" if adapted else "entropy_profile.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"responses": len(per_response), "model": "adapted" if adapted else "base",
            "seed": cfg.seed, "checksum": base.checksum()[:16],
            "run_config": json.dumps(cfg.to_dict(), sort_keys=True)}
    write_profile_csv(profile, path, meta)
    return path


COMPARE_FIELDS = ("strategy", "cohort_id", "domain", "M", "k", "rouge_lsum", "mean_question_nll",
                  "mean_prefix_entropy", "adapted_passes", "base_passes", "error")


def cmd_compare(cfg: RunConfig, out: Path) -> Path:
    base = _load_base(cfg)
    cohorts, refs = _cohorts(cfg)
    rows = []
    for name in cfg.strategies:
        acfg = strategy_config(name, cfg.adapt)
        for rep in run_cohort_protocol(base, cohorts, acfg, refs, workers=cfg.workers):
            rows.append({"strategy": name, "cohort_id": rep.cohort_id, "domain": rep.domain, "M": rep.M,
                         "k": rep.k, "rouge_lsum": rep.rouge_lsum, "mean_question_nll": rep.mean_question_nll,
                         "mean_prefix_entropy": rep.mean_prefix_entropy,
                         "adapted_passes": rep.passes.get("adapted", 0), "base_passes": rep.passes.get("base", 0),
                         "error": rep.error or ""})
    path = out / "compare.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# run_config={json.dumps(cfg.to_dict(), sort_keys=True)}\n")
        w = csv.DictWriter(fh, fieldnames=COMPARE_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return path


# ---------------------------------------------------------------------------
# argparse glue


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sytta", description="Test-time adaptation of a tiny byte-level LM.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("pretrain", "train the base model on the general corpus"),
                           ("gen-corpus", "write domain QA files"),
                           ("adapt", "run the cohort protocol and write reports"),
                           ("profile-entropy", "per-position response entropy CSV"),
                           ("compare", "strategies x cohorts table")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", help="key/value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", help="output directory (default: run.out_dir)")
        if name == "adapt":
            sp.add_argument("--cohort", help="questions-only JSONL file to adapt on (no scoring)")
        if name == "profile-entropy":
            sp.add_argument("--adapted", action="store_true", help="profile the adapted model instead of the base")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_run_config(args.config, args.set)
        out = Path(args.out or cfg.out_dir)
        if args.command == "pretrain":
            print(cmd_pretrain(cfg, out))
        elif args.command == "gen-corpus":
            for p in cmd_gen_corpus(cfg, out):
                print(p)
        elif args.command == "adapt":
            for r in cmd_adapt(cfg, out, args.cohort):
                print(f"{r.cohort_id}\trouge_lsum={r.rouge_lsum}\tadapted_passes={r.passes['adapted']}"
                      + (f"\terror={r.error}" if r.error else ""))
        elif args.command == "profile-entropy":
            print(cmd_profile_entropy(cfg, out, args.adapted))
        elif args.command == "compare":
            print(cmd_compare(cfg, out))
    except (ConfigError, AdaptConfigError, ObjectiveConfigError, WeightingConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
