"""Command-line entry point: import, train-vae, train-dit, sample, eval, export-latents.

Every command resolves its configuration (file + ``--set`` overrides + flags)
and writes a run manifest next to its outputs. ``atomdiff rerun MANIFEST``
replays a command from that manifest alone.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import platform
import subprocess
import sys
from pathlib import Path

import click
import torch

from atomdiff import __version__
from atomdiff.config import ConfigError, RunConfig, config_from_dict, load_config
from atomdiff.datasets import (
    CLASS_NAMES,
    AtomCountHistogram,
    DataError,
    DatasetRecord,
    class_from_name,
    dumps_jsonl,
    load_jsonl,
    parse_cif_lite,
    parse_xyz,
    write_cif_lite,
    write_xyz,
)
from atomdiff.geometry import AtomicSystem, GeometryError, niggli_reduce_system
from atomdiff.nn import NumericalError
from atomdiff.vocab import UnknownElementError, element_data_version, index_to_symbol, symbol_to_index

log = logging.getLogger("atomdiff")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3
MANIFEST_FORMAT = "atomdiff-run/1"
FORMATS = {".xyz": "xyz", ".cif": "cif", ".jsonl": "jsonl"}


# --------------------------------------------------------------- plumbing


def _git_revision() -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5
        )
    except (OSError, subprocess.SubprocessError):
        return None
    if out.returncode != 0:
        return None
    return out.stdout.strip() or None


def _manifest_path(output: Path) -> Path:
    output = Path(output)
    return output / "run_manifest.json" if output.is_dir() else output.with_name(output.name + ".manifest.json")


def write_manifest(command: str, params: dict, config: RunConfig, output: Path, extra: dict | None = None) -> Path:
    manifest = {
        "format": MANIFEST_FORMAT,
        "command": command,
        "params": params,
        "config": config.to_dict(),
        "seed": config.seed,
        "version": __version__,
        "git": _git_revision(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "element_data": element_data_version(),
    }
    if extra:
        manifest.update(extra)
    path = _manifest_path(output)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def resolve_config(config_path, overrides, seed) -> RunConfig:
    cfg = load_config(config_path, list(overrides))
    if seed is not None:
        cfg.seed = int(seed)
    return cfg.validate()


def _config_options(f):
    f = click.option("--seed", type=int, default=None, help="Overrides the config seed.")(f)
    f = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                     help="Config override, e.g. --set vae.lr=1e-3 (repeatable).")(f)
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="YAML config file.")(f)
    return f


def _load_records(path) -> list[DatasetRecord]:
    if path is None:
        raise click.UsageError("no dataset given (use --data or set train_data in the config)")
    if not Path(path).is_file():
        raise DataError(f"dataset {path} not found")
    return load_jsonl(path)


# ----------------------------------------------------------------- import


def _discover(sources, forced: str | None):
    """Yield (format, path, id) for every input file, in a deterministic order."""
    for src in sources:
        src = Path(src)
        if src.is_dir():
            files = sorted(p for p in src.rglob("*") if p.is_file() and (forced or p.suffix.lower() in FORMATS))
            for p in files:
                yield forced or FORMATS[p.suffix.lower()], p, p.relative_to(src).as_posix()
        elif src.is_file():
            fmt = forced or FORMATS.get(src.suffix.lower())
            if fmt is None:
                raise DataError(f"cannot infer format of {src}; pass --format")
            yield fmt, src, src.name
        else:
            raise DataError(f"input {src} does not exist")


def _strip_hydrogens(system: AtomicSystem) -> AtomicSystem:
    keep = system.atom_types != symbol_to_index("H")
    if keep.all() or not keep.any():
        return system
    return AtomicSystem.molecule(system.atom_types[keep], system.cart_coords[keep])


def run_import(config: RunConfig, params: dict) -> dict:
    out = Path(params["out"])
    records, counts, seen = [], {"xyz": 0, "cif": 0, "jsonl": 0}, set()
    for fmt, path, rid in _discover(params["sources"], params.get("format")):
        try:
            if fmt == "jsonl":
                batch = load_jsonl(path)
            else:
                text = path.read_text(encoding="utf-8")
                system = parse_xyz(text) if fmt == "xyz" else parse_cif_lite(text)
                batch = [DatasetRecord.from_system(rid, system)]
        except (DataError, GeometryError, UnicodeDecodeError) as err:
            raise DataError(f"{path}: {err}") from None
        for rec in batch:
            system = rec.system
            if system.periodic:
                system = niggli_reduce_system(system)
            elif not config.include_hydrogens:
                system = _strip_hydrogens(system)
            if rec.id in seen:
                raise DataError(f"duplicate record id {rec.id!r} (from {path})")
            seen.add(rec.id)
            records.append(DatasetRecord(rec.id, system, rec.class_label))
        counts[fmt] += len(batch)
    if not records:
        log.warning("no structures found in %s", ", ".join(map(str, params["sources"])))
    too_big = sum(r.system.num_atoms > config.n_max for r in records)
    if too_big:
        log.warning("%d records exceed n_max=%d and will be rejected by batching", too_big, config.n_max)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps_jsonl(records), encoding="utf-8")
    click.echo(" ".join(f"{k}={v}" for k, v in counts.items()) + f" total={len(records)}")
    return {"counts": counts, "records": len(records)}


# --------------------------------------------------------------- training


def _log_epoch(every: int):
    def fn(summary):
        if summary["epoch"] % every == 0:
            click.echo(json.dumps(summary), err=True)

    return fn


def run_train_vae(config: RunConfig, params: dict) -> dict:
    from atomdiff.vae import train_vae

    records = _load_records(params.get("data") or config.train_data)
    out = Path(params["out_dir"])
    resume = out / "vae_ckpt" if params.get("resume") else None
    if resume is not None and not (resume / "manifest.json").is_file():
        raise DataError(f"nothing to resume: {resume} has no checkpoint")
    _, history = train_vae(config, records, out_dir=out, resume=resume, log_fn=_log_epoch(params["log_every"]))
    final = history[-1] if history else {}
    click.echo(f"vae checkpoint: {out / 'vae_ckpt'} step={final.get('step')}")
    return {"checkpoint": str(out / "vae_ckpt"), "final": final}


def run_train_dit(config: RunConfig, params: dict) -> dict:
    from atomdiff.diffusion import train_dit
    from atomdiff.vae import load_vae

    vae_path = params.get("vae")
    if not vae_path:
        raise click.UsageError("train-dit needs a trained VAE checkpoint (--vae); run train-vae first")
    if not (Path(vae_path) / "manifest.json").is_file():
        raise DataError(f"VAE checkpoint {vae_path} not found; run train-vae first")
    vae, _ = load_vae(vae_path)
    config.vae = vae.cfg
    records = _load_records(params.get("data") or config.train_data)
    out = Path(params["out_dir"])
    resume = out / "dit_ckpt" if params.get("resume") else None
    if resume is not None and not (resume / "manifest.json").is_file():
        raise DataError(f"nothing to resume: {resume} has no checkpoint")
    _, _, history = train_dit(config, vae, records, out_dir=out, resume=resume, vae_path=str(vae_path),
                              log_fn=_log_epoch(params["log_every"]))
    final = history[-1] if history else {}
    click.echo(f"dit checkpoint: {out / 'dit_ckpt'} step={final.get('step')}")
    return {"checkpoint": str(out / "dit_ckpt"), "final": final}


# --------------------------------------------------------------- sampling


def run_sample(config: RunConfig, params: dict) -> dict:
    from atomdiff.diffusion import load_dit
    from atomdiff.sampler import SamplingSpec, sample
    from atomdiff.vae import load_vae

    s = config.sampling
    dit, dit_manifest = load_dit(params["dit"], use_ema=s.use_ema)
    vae_path = params.get("vae") or dit_manifest.get("vae_checkpoint")
    if not vae_path:
        raise click.UsageError("no VAE checkpoint given and none recorded in the DiT checkpoint")
    vae, _ = load_vae(vae_path)
    label = class_from_name(params["class_name"])
    hist = None
    if params.get("n_atoms") is None:
        stored = dit_manifest.get("atom_count_histograms", {}).get(CLASS_NAMES[label])
        if stored is None:
            raise DataError(f"DiT checkpoint has no atom-count histogram for {CLASS_NAMES[label]}; pass --n-atoms")
        hist = AtomCountHistogram.from_json(stored)
    spec = SamplingSpec(label, s.num_samples, s.steps, s.guidance, params.get("n_atoms"), hist, config.seed)
    systems = sample(dit, vae, spec)
    records = [DatasetRecord(f"sample-{i:05d}", sys_, label) for i, sys_ in enumerate(systems) if sys_ is not None]
    failed = [f"sample-{i:05d}" for i, sys_ in enumerate(systems) if sys_ is None]
    out = Path(params["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps_jsonl(records), encoding="utf-8")
    if params.get("export_dir"):
        export = Path(params["export_dir"])
        export.mkdir(parents=True, exist_ok=True)
        for rec in records:
            if rec.system.periodic:
                (export / f"{rec.id}.cif").write_text(write_cif_lite(rec.system, rec.id), encoding="utf-8")
            else:
                (export / f"{rec.id}.xyz").write_text(write_xyz(rec.system, rec.id), encoding="utf-8")
    click.echo(f"sampled {len(systems)} {CLASS_NAMES[label]}s: written={len(records)} decode_failures={len(failed)}")
    return {"written": len(records), "decode_failures": len(failed), "failed_ids": failed,
            "vae_checkpoint": str(vae_path)}


# ------------------------------------------------------------- evaluation


def run_eval(config: RunConfig, params: dict) -> dict:
    from atomdiff.metrics import aggregate_report

    samples_path = Path(params["samples"])
    records = _load_records(samples_path)
    systems: list = [r.system for r in records]
    ids = [r.id for r in records]
    failures = 0
    sample_manifest = _manifest_path(samples_path)
    if sample_manifest.is_file():
        failures = int(json.loads(sample_manifest.read_text(encoding="utf-8")).get("decode_failures", 0))
        systems += [None] * failures
        ids += [f"decode-failure-{k}" for k in range(failures)]
    originals = None
    if params.get("originals"):
        by_id = {r.id: r.system for r in load_jsonl(params["originals"])}
        missing = [i for i in ids[: len(records)] if i not in by_id]
        if missing or failures:
            raise DataError(f"cannot align samples with originals (unmatched ids: {missing[:5]})")
        originals = [by_id[i] for i in ids]
    reference = [r.system for r in load_jsonl(params["reference"])] if params.get("reference") else None
    report = aggregate_report(systems, originals=originals, reference=reference, config=config.to_dict())
    out = Path(params["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    body = report.to_json()
    per_sample = body.pop("per_sample")
    (out / "report.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(out / "per_sample.jsonl", "w", encoding="utf-8") as fh:
        for rid, flags in zip(ids, per_sample):
            fh.write(json.dumps({"id": rid, **flags}, sort_keys=True) + "\n")
    click.echo(" ".join(f"{k}={v:.4f}" for k, v in report.rates.items()))
    return {"rates": report.rates}


def run_export_latents(config: RunConfig, params: dict) -> dict:
    from atomdiff.vae import encode_records, load_vae

    vae, _ = load_vae(params["vae"])
    records = _load_records(params.get("data") or config.train_data)
    n_max = max([config.n_max] + [r.system.num_atoms for r in records])
    latents = encode_records(vae, records, n_max)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "atom_index", "element", "class"] + [f"z{k + 1}" for k in range(vae.latent_dim)])
    rows = 0
    for rec, z in zip(records, latents):
        for i, t in enumerate(rec.system.atom_types):
            writer.writerow([rec.id, i, index_to_symbol(int(t)), CLASS_NAMES[rec.class_label]]
                            + [repr(float(v)) for v in z[i]])
            rows += 1
    out = Path(params["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(buf.getvalue(), encoding="utf-8")
    click.echo(f"wrote {rows} atom rows x {vae.latent_dim} latent dims to {out}")
    return {"rows": rows}


def run_synth(config: RunConfig, params: dict) -> dict:
    from atomdiff.synthetic import synthetic_corpus

    records = synthetic_corpus(params["molecules"], params["crystals"], seed=config.seed)
    out = Path(params["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps_jsonl(records), encoding="utf-8")
    click.echo(f"wrote {len(records)} synthetic records to {out}")
    return {"records": len(records)}


RUNNERS = {
    "import": (run_import, "out"),
    "train-vae": (run_train_vae, "out_dir"),
    "train-dit": (run_train_dit, "out_dir"),
    "sample": (run_sample, "out"),
    "eval": (run_eval, "out_dir"),
    "export-latents": (run_export_latents, "out"),
    "synth": (run_synth, "out"),
}


def execute(command: str, config: RunConfig, params: dict) -> Path:
    runner, out_key = RUNNERS[command]
    extra = runner(config, params)
    return write_manifest(command, params, config, Path(params[out_key]), extra)


# ------------------------------------------------------------------- click


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="atomdiff")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def cli(verbose):
    """All-atom latent diffusion for molecules and crystals."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(levelname)s %(message)s")


@cli.command("import")
@click.argument("sources", nargs=-1, required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output JSONL.")
@click.option("--format", "fmt", type=click.Choice(sorted(set(FORMATS.values()))), default=None,
              help="Force the input format instead of using file extensions.")
@_config_options
def import_cmd(sources, out, fmt, config_path, overrides, seed):
    """Convert XYZ / CIF / JSONL files (or directories of them) to canonical JSONL."""
    cfg = resolve_config(config_path, overrides, seed)
    execute("import", cfg, {"sources": [str(s) for s in sources], "out": out, "format": fmt})


@cli.command("train-vae")
@click.option("--data", type=click.Path(dir_okay=False), default=None, help="Training JSONL.")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--resume", is_flag=True, help="Continue from OUT_DIR/vae_ckpt.")
@click.option("--log-every", type=int, default=10, show_default=True)
@_config_options
def train_vae_cmd(data, out_dir, resume, log_every, config_path, overrides, seed):
    """Train the first-stage VAE."""
    cfg = resolve_config(config_path, overrides, seed)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    execute("train-vae", cfg, {"data": data, "out_dir": out_dir, "resume": resume, "log_every": log_every})


@cli.command("train-dit")
@click.option("--vae", type=click.Path(), default=None, help="Trained VAE checkpoint directory.")
@click.option("--data", type=click.Path(dir_okay=False), default=None, help="Training JSONL.")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--resume", is_flag=True, help="Continue from OUT_DIR/dit_ckpt.")
@click.option("--log-every", type=int, default=10, show_default=True)
@_config_options
def train_dit_cmd(vae, data, out_dir, resume, log_every, config_path, overrides, seed):
    """Train the flow-matching DiT in the latent space of a frozen VAE."""
    cfg = resolve_config(config_path, overrides, seed)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    execute("train-dit", cfg, {"vae": vae, "data": data, "out_dir": out_dir, "resume": resume,
                               "log_every": log_every})


@cli.command("sample")
@click.option("--dit", required=True, type=click.Path(), help="DiT checkpoint directory.")
@click.option("--vae", type=click.Path(), default=None, help="VAE checkpoint (default: the one the DiT used).")
@click.option("--class", "class_name", required=True, type=click.Choice(["molecule", "crystal"]))
@click.option("-n", "--num", type=int, default=None, help="Number of systems (sampling.num_samples).")
@click.option("--steps", type=int, default=None, help="Euler steps T (sampling.steps).")
@click.option("--guidance", type=float, default=None, help="CFG scale gamma (sampling.guidance).")
@click.option("--n-atoms", type=int, default=None, help="Pin the atom count instead of drawing it.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output JSONL.")
@click.option("--export-dir", type=click.Path(file_okay=False), default=None, help="Also write XYZ/CIF files here.")
@_config_options
def sample_cmd(dit, vae, class_name, num, steps, guidance, n_atoms, out, export_dir, config_path, overrides, seed):
    """Generate molecules or crystals with guided Euler integration."""
    cfg = resolve_config(config_path, overrides, seed)
    for key, value in (("num_samples", num), ("steps", steps), ("guidance", guidance)):
        if value is not None:
            setattr(cfg.sampling, key, value)
    cfg.validate()
    if n_atoms is not None and n_atoms < 1:
        raise click.BadParameter("must be >= 1", param_hint="--n-atoms")
    execute("sample", cfg, {"dit": dit, "vae": vae, "class_name": class_name, "n_atoms": n_atoms, "out": out,
                            "export_dir": export_dir})


@cli.command("eval")
@click.argument("samples", type=click.Path(dir_okay=False))
@click.option("--originals", type=click.Path(dir_okay=False), default=None,
              help="Ground-truth JSONL with matching ids, for match rate / RMSD.")
@click.option("--reference", type=click.Path(dir_okay=False), default=None, help="Training JSONL for novelty.")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@_config_options
def eval_cmd(samples, originals, reference, out_dir, config_path, overrides, seed):
    """Validity, uniqueness and (optionally) match-rate report for a JSONL of structures."""
    cfg = resolve_config(config_path, overrides, seed)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    execute("eval", cfg, {"samples": samples, "originals": originals, "reference": reference, "out_dir": out_dir})


@cli.command("export-latents")
@click.option("--vae", required=True, type=click.Path(), help="VAE checkpoint directory.")
@click.option("--data", type=click.Path(dir_okay=False), default=None, help="Dataset JSONL.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output CSV.")
@_config_options
def export_latents_cmd(vae, data, out, config_path, overrides, seed):
    """Per-atom deterministic latents as CSV (id, atom_index, element, class, z1..zd)."""
    cfg = resolve_config(config_path, overrides, seed)
    execute("export-latents", cfg, {"vae": vae, "data": data, "out": out})


@cli.command("synth")
@click.option("--molecules", type=int, default=32, show_default=True)
@click.option("--crystals", type=int, default=32, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@_config_options
def synth_cmd(molecules, crystals, out, config_path, overrides, seed):
    """Write a small synthetic corpus of valid molecules and neutral binary crystals."""
    cfg = resolve_config(config_path, overrides, seed)
    execute("synth", cfg, {"molecules": molecules, "crystals": crystals, "out": out})


@cli.command("rerun")
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
def rerun_cmd(manifest):
    """Replay a command from its run manifest (same config, seed and paths)."""
    data = json.loads(Path(manifest).read_text(encoding="utf-8"))
    if data.get("format") != MANIFEST_FORMAT or data.get("command") not in RUNNERS:
        raise DataError(f"{manifest} is not an atomdiff run manifest")
    execute(data["command"], config_from_dict(data["config"]).validate(), data["params"])


def main(argv=None) -> int:
    torch.use_deterministic_algorithms(True)
    try:
        cli.main(args=argv, prog_name="atomdiff", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except (click.ClickException, ConfigError) as exc:
        click.echo(f"usage error: {exc.format_message() if isinstance(exc, click.ClickException) else exc}", err=True)
        return EXIT_USAGE
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERICAL
    except (DataError, GeometryError, UnknownElementError, FileNotFoundError, KeyError, ValueError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
