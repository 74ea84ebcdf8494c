"""Command-line entry point: ``regionwx <command>``.

Every command resolves its configuration (defaults < ``--config`` file <
``--set key=value`` < dedicated flags), validates it, then works inside
``<workdir>/runs/<command>/``, which receives ``config.json``, ``seeds.json``
and an ``.in_progress`` marker that is removed on success.

Exit codes: 0 success, 1 user error (bad config, missing inputs), 2 internal error.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
import traceback
from pathlib import Path

import click
import numpy as np
import torch

from . import config as C
from .checkpoint import CheckpointError, load_params, read_checkpoint, save_checkpoint
from .codecs import Codec, CodecSpec, CodecTrainer, GenLossWeights
from .diffusion import DiT, DiTConfig, NoiseSchedule, enmax
from .forecaster import Forecaster, ForecasterConfig
from .grid import Climatology, GridError, NormStats, WeatherState, build_climatology
from .metrics import MetricError, evaluate_precipitation, evaluate_rollout, read_table, write_table
from .precip import (
    DiagnosisError,
    LatentEncoder,
    PrecipDiagnoser,
    codec_inputs,
    diffusion_dataset,
    write_diagnosis,
)
from .precip import train_dit as run_dit_training
from .rollout import RolloutError, StoreBoundaryProvider, greedy_plan, rollout, write_forecast_archive
from .store import (
    HOUR,
    DatasetManifest,
    StoreError,
    StoreWriter,
    compute_stats,
    format_time,
    generate_synthetic,
    parse_time,
    precip_grid_for,
)
from .training import (
    TrainingError,
    evaluate_mse,
    finetune_leadtime,
    forecast_pairs,
    make_optimizer,
    normalize_topography,
    train_forecaster,
)

log = logging.getLogger("regionwx")


class UserError(Exception):
    """Problem with the operator's inputs; reported with exit code 1."""


USER_ERRORS = (UserError, C.ConfigError, StoreError, CheckpointError, GridError, RolloutError,
               TrainingError, DiagnosisError, MetricError, FileNotFoundError)


class Stage:
    """Context manager that labels failures with the pipeline stage."""

    def __init__(self, command: str, stage: str):
        self.label = f"{command}/{stage}"

    def __enter__(self):
        log.info("[%s] start", self.label)
        return self

    def __exit__(self, kind, exc, tb):
        if exc is None:
            return False
        if isinstance(exc, USER_ERRORS):
            raise UserError(f"[{self.label}] {exc}") from exc
        if isinstance(exc, (click.exceptions.Exit, click.ClickException)):
            return False
        raise RuntimeError(f"[{self.label}] internal error: {exc!r}") from exc


class Run:
    """Per-command output directory with resolved config and seed manifest."""

    def __init__(self, cfg: dict, command: str):
        self.cfg, self.command = cfg, command
        self.workdir = Path(cfg["paths"]["workdir"])
        self.dir = self.workdir / "runs" / command

    def __enter__(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / ".in_progress").touch()
        C.dump(self.cfg, self.dir / "config.json")
        seed = self.cfg["seed"]
        (self.dir / "seeds.json").write_text(json.dumps({"seed": seed, "torch": seed,
                                                         "numpy": seed}, indent=2))
        torch.manual_seed(seed)
        return self

    def __exit__(self, kind, exc, tb):
        if exc is None:
            (self.dir / ".in_progress").unlink(missing_ok=True)
        return False

    # shared workspace locations
    @property
    def data(self) -> Path:
        return self.workdir / "data"

    @property
    def ckpt(self) -> Path:
        return self.workdir / "checkpoints"

    def manifest(self) -> DatasetManifest:
        if not (self.data / "manifest.json").exists():
            raise UserError(f"no dataset at {self.data}; run prepare-data first")
        return DatasetManifest.open(self.data)

    def stats(self) -> NormStats:
        path = self.workdir / "stats.json"
        if not path.exists():
            raise UserError(f"{path} missing; run prepare-data first")
        return NormStats.load(path)

    def climatology(self) -> Climatology:
        return Climatology.load(self.workdir / "climatology.npz")


class RegionGroup(click.Group):
    """Maps exceptions onto the documented exit codes."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
            code = rv if isinstance(rv, int) else 0
        except click.exceptions.Exit as exc:
            code = exc.exit_code
        except click.exceptions.Abort:
            click.echo("aborted", err=True)
            code = 1
        except click.ClickException as exc:
            exc.show()
            code = 1
        except USER_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            code = 1
        except Exception as exc:  # noqa: BLE001
            click.echo(f"internal error: {exc}", err=True)
            if log.isEnabledFor(logging.DEBUG):
                traceback.print_exc()
            code = 2
        if standalone_mode:
            sys.exit(code)
        return code


def _resolve(ctx, **flags) -> dict:
    """Config with flag overrides applied last; ``flags`` maps dotted keys to values."""
    obj = ctx.obj
    overrides = list(obj["set"])
    if obj["workdir"] is not None:
        overrides.append({"paths": {"workdir": obj["workdir"]}})
    if obj["seed"] is not None:
        overrides.append({"seed": obj["seed"]})
    for key, value in flags.items():
        if value is not None:
            section, name = key.split(".")
            overrides.append({section: {name: value}})
    return C.load_config(obj["config"], overrides)


@click.group(cls=RegionGroup)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="YAML/JSON run configuration (defaults: built-in toy profile).")
@click.option("--workdir", default=None, help="Workspace directory (overrides paths.workdir).")
@click.option("--seed", type=int, default=None, help="Global seed (overrides seed).")
@click.option("--set", "set_", multiple=True, metavar="KEY=VALUE",
              help="Override any config key, e.g. --set train.steps=50.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def cli(ctx, config_path, workdir, seed, set_, verbose):
    """Regional weather forecasting and precipitation diagnosis pipeline."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    ctx.obj = {"config": config_path, "workdir": workdir, "seed": seed, "set": set_}


# data ----------------------------------------------------------------------

def _import_archive(path: Path, root: Path, cfg: dict, force: bool) -> DatasetManifest:
    """Convert a local ``.npz`` archive (state/tp/cmpas/topography/start) into a store."""
    if path.suffix != ".npz":
        raise UserError(f"unsupported source {path}; expected an .npz archive")
    with np.load(path, allow_pickle=False) as z:
        missing = {"state", "tp", "cmpas", "topography", "start"} - set(z.files)
        if missing:
            raise UserError(f"{path} lacks arrays {sorted(missing)}")
        grid, inv = C.grid_of(cfg), C.inventory_of(cfg)
        state = z["state"]
        if state.shape[1:] != (inv.n_channels, *grid.shape):
            raise UserError(f"state shape {state.shape[1:]} does not match the configured grid "
                            f"{(inv.n_channels, *grid.shape)}")
        crop = cfg["data"]["precip_crop_lat"]
        writer = StoreWriter(root, grid, inv, precip_grid_for(grid, crop, cfg["data"]["precip_factor"]),
                             crop, cfg["data"]["chunk_hours"],
                             tags={"kind": "archive", "source": str(path)}, force=force)
        writer.set_topography(z["topography"])
        writer.append_run(parse_time(str(z["start"])), state=state.astype("<f4"),
                          tp=z["tp"].astype("<f4"), cmpas=z["cmpas"].astype("<f4"))
        return writer.finalize()


@cli.command("prepare-data")
@click.option("--synthetic", is_flag=True, help="Generate a seeded synthetic dataset.")
@click.option("--source", type=click.Path(), default=None, help="Local .npz archive to convert.")
@click.option("--hours", type=int, default=None, help="Hours per synthetic yearly run.")
@click.option("--force", is_flag=True, help="Overwrite an existing dataset.")
@click.pass_context
def prepare_data(ctx, synthetic, source, hours, force):
    """Build the dataset store, normalization stats and climatology."""
    if synthetic == (source is not None):
        raise UserError("give exactly one of --synthetic or --source")
    cfg = _resolve(ctx, **{"data.hours": hours})
    if source is not None and not Path(source).exists():
        raise UserError(f"source {source} does not exist")
    with Run(cfg, "prepare-data") as run:
        if (run.data / "manifest.json").exists() and not force:
            raise UserError(f"{run.data} already holds a dataset; pass --force to overwrite")
        with Stage("prepare-data", "write"):
            if synthetic:
                d = cfg["data"]
                man = generate_synthetic(run.data, C.grid_of(cfg), C.inventory_of(cfg), d["hours"],
                                         cfg["seed"], tuple(d["years"]),
                                         precip_crop_lat=d["precip_crop_lat"],
                                         precip_factor=d["precip_factor"],
                                         chunk_hours=d["chunk_hours"], force=force)
            else:
                man = _import_archive(Path(source), run.data, cfg, force)
        with Stage("prepare-data", "validate"):
            man.validate()
        with Stage("prepare-data", "statistics"):
            stats = compute_stats(man, "train")
            stats.save(run.workdir / "stats.json")
            train = man.split("train")
            clim = build_climatology(((t, man.read("state", t)) for t in train),
                                     man.inventory.channel_names, sorted({t.year for t in train}),
                                     strict=cfg["profile"] == "full")
            clim.save(run.workdir / "climatology.npz")
        click.echo(f"dataset: {len(man.timestamps)} hours, {len(man.inventory.channel_names)} channels "
                   f"-> {run.data}")


# forecaster training --------------------------------------------------------

def _loss_writer(path: Path, header, append: bool):
    new = not (append and path.exists())
    fh = path.open("a" if not new else "w", newline="")
    out = csv.writer(fh)
    if new:
        out.writerow(header)
    return fh, out


def _forecaster_ckpt(run: Run, lead: int) -> Path:
    return run.ckpt / f"forecaster_{lead}h.pt"


def load_forecaster(path: Path) -> Forecaster:
    payload = read_checkpoint(path, "forecaster")
    cfg = ForecasterConfig.from_dict(payload["config"])
    model = Forecaster(cfg)
    load_params(model, payload, cfg.architecture_dict())
    model.eval()
    return model


@cli.command("train-forecaster")
@click.option("--steps", type=int, default=None, help="Total optimisation steps.")
@click.option("--resume", is_flag=True, help="Continue from the last checkpoint.")
@click.pass_context
def train_forecaster_cmd(ctx, steps, resume):
    """Train the 1-hour forecaster."""
    cfg = _resolve(ctx, **{"train.steps": steps})
    tcfg = cfg["train"]
    with Run(cfg, "train-forecaster") as run:
        man, stats = run.manifest(), run.stats()
        fcfg = C.forecaster_config(cfg, lead=1)
        path = _forecaster_ckpt(run, 1)
        with Stage("train-forecaster", "data"):
            data = forecast_pairs(man, stats, 1, "train", fcfg.boundary_width)
        torch.manual_seed(cfg["seed"])
        model = Forecaster(fcfg)
        opt = make_optimizer(model, tcfg["lr"])
        start, rng_state = 0, None
        if resume:
            with Stage("train-forecaster", "resume"):
                payload = read_checkpoint(path, "forecaster")
                load_params(model, payload, fcfg.architecture_dict())
                opt.load_state_dict(payload["optimizer"])
                start = payload["metadata"]["step"]
                rng_state = payload["metadata"]["rng_state"]
        remaining = tcfg["steps"] - start
        fh, out = _loss_writer(run.dir / "loss.csv", ["step", "loss"], append=resume)

        def checkpoint(step, optimizer, gen):
            save_checkpoint(path, "forecaster", fcfg.to_dict(), model, optimizer,
                            {"step": step, "rng_state": gen.get_state(), "seed": cfg["seed"]},
                            arch=fcfg.architecture_dict())

        def callback(step, loss, optimizer, gen):
            out.writerow([step, f"{loss:.8g}"])
            if step % tcfg["checkpoint_every"] == 0:
                fh.flush()
                checkpoint(step, optimizer, gen)

        with fh, Stage("train-forecaster", "optimise"):
            opt, losses, gen = train_forecaster(model, data, max(remaining, 0), tcfg["batch_size"],
                                                tcfg["lr"], cfg["seed"], opt, start, rng_state,
                                                callback)
            checkpoint(max(tcfg["steps"], start), opt, gen)
        if losses:
            click.echo(f"step {start + len(losses)}: loss {losses[-1]:.4g}")
        try:
            val = forecast_pairs(man, stats, 1, "val", fcfg.boundary_width)
            click.echo(f"validation MSE {evaluate_mse(model, val):.4g}")
        except TrainingError:
            pass


@cli.command("finetune-leadtime")
@click.option("--lead", "leads", type=int, multiple=True, help="Target lead(s); default 3, 6, 24.")
@click.option("--steps", type=int, default=None)
@click.pass_context
def finetune_cmd(ctx, leads, steps):
    """Derive the 3/6/24-hour forecasters from the 1-hour model."""
    cfg = _resolve(ctx, **{"finetune.steps": steps})
    leads = leads or tuple(cfg["finetune"]["leads"])
    with Run(cfg, "finetune-leadtime") as run:
        man, stats = run.manifest(), run.stats()
        with Stage("finetune-leadtime", "load-base"):
            base = load_forecaster(_forecaster_ckpt(run, 1))
        fh, out = _loss_writer(run.dir / "loss.csv", ["lead", "step", "loss"], append=False)
        with fh:
            for lead in leads:
                with Stage("finetune-leadtime", f"{lead}h"):
                    data = forecast_pairs(man, stats, lead, "train", base.cfg.boundary_width)
                    model = finetune_leadtime(base, lead, None, 0)
                    _, losses, _ = train_forecaster(model, data, cfg["finetune"]["steps"],
                                                    cfg["train"]["batch_size"], cfg["train"]["lr"],
                                                    cfg["seed"] + lead)
                    for i, loss in enumerate(losses):
                        out.writerow([lead, i + 1, f"{loss:.8g}"])
                    save_checkpoint(_forecaster_ckpt(run, lead), "forecaster", model.cfg.to_dict(),
                                    model, metadata={"base": "forecaster_1h.pt",
                                                     "steps": len(losses)},
                                    arch=model.cfg.architecture_dict())
                click.echo(f"{lead}h model: {len(losses)} steps")


# codecs and denoiser ---------------------------------------------------------

def _codec_ckpt(run: Run, codec_id: str) -> Path:
    return run.ckpt / f"codec_{codec_id}.pt"


def _save_codec(path: Path, trainer: CodecTrainer, batch_gen: torch.Generator):
    save_checkpoint(path, "codec", trainer.codec.spec.to_dict(), trainer.codec, trainer.opt_g,
                    {"step": trainer.step_count, "rng_state": trainer.generator.get_state(),
                     "batch_rng": batch_gen.get_state(), "opt_d": trainer.opt_d.state_dict(),
                     "discriminator": trainer.discriminator.state_dict()})


def load_codec(path: Path) -> Codec:
    payload = read_checkpoint(path, "codec")
    spec = CodecSpec.from_dict(payload["config"])
    codec = Codec(spec)
    load_params(codec, payload, spec.to_dict())
    return codec


@cli.command("train-vae")
@click.option("--codec", "codec_ids", type=click.Choice(["V_x", "V_p", "V_cmpas"]), multiple=True,
              help="Codec(s) to train; default all three.")
@click.option("--steps", type=int, default=None)
@click.option("--resume", is_flag=True)
@click.pass_context
def train_vae_cmd(ctx, codec_ids, steps, resume):
    """Train the state, reanalysis-precipitation and observed-precipitation codecs."""
    cfg = _resolve(ctx, **{"vae.steps": steps})
    v = cfg["vae"]
    codec_ids = codec_ids or ("V_x", "V_p", "V_cmpas")
    specs = C.codec_specs(cfg)
    weights = GenLossWeights(perceptual=v["perceptual"], kl=v["kl"], disc_start=v["disc_start"])
    with Run(cfg, "train-vae") as run:
        man, stats = run.manifest(), run.stats()
        for cid in codec_ids:
            label = f"{cid}"
            with Stage("train-vae", f"{label}/data"):
                x = codec_inputs(man, stats, cid, "train")
            torch.manual_seed(cfg["seed"])
            codec = Codec(specs[cid])
            trainer = CodecTrainer(codec, weights, lr=v["lr"], disc_lr=v["lr"], seed=cfg["seed"])
            path = _codec_ckpt(run, cid)
            if resume and path.exists():
                with Stage("train-vae", f"{label}/resume"):
                    payload = read_checkpoint(path, "codec")
                    load_params(codec, payload, specs[cid].to_dict())
                    meta = payload["metadata"]
                    trainer.discriminator.load_state_dict(meta["discriminator"])
                    trainer.opt_g.load_state_dict(payload["optimizer"])
                    trainer.opt_d.load_state_dict(meta["opt_d"])
                    trainer.generator.set_state(meta["rng_state"])
                    trainer.step_count = meta["step"]
            batch_gen = torch.Generator().manual_seed(cfg["seed"] + 17)
            if resume and path.exists():
                batch_gen.set_state(payload["metadata"]["batch_rng"])

            fh, out = _loss_writer(run.dir / f"loss_{cid}.csv",
                                   ["step", "total", "mae", "lpips", "kl", "adversarial", "psi"],
                                   append=resume)
            with fh, Stage("train-vae", f"{label}/optimise"):
                parts = None
                while trainer.step_count < v["steps"]:
                    idx = torch.randint(0, len(x), (min(v["batch_size"], len(x)),), generator=batch_gen)
                    parts = trainer.step(x[idx])
                    out.writerow([trainer.step_count] + [f"{parts[k]:.6g}" for k in
                                                         ("total", "mae", "lpips", "kl",
                                                          "adversarial", "psi")])
                    if trainer.step_count % v["checkpoint_every"] == 0:
                        _save_codec(path, trainer, batch_gen)
                _save_codec(path, trainer, batch_gen)
            with torch.no_grad():
                codec.eval()
                recon = codec.decode(codec.encode(x[:16], generator=torch.Generator().manual_seed(0)))
                mae = float(torch.mean(torch.abs(recon - x[:16])))
            click.echo(f"{cid}: {trainer.step_count} steps, reconstruction MAE {mae:.4g} "
                       f"(input std {float(x.std()):.4g})")


def _dit_ckpt(run: Run) -> Path:
    return run.ckpt / "dit.pt"


def _load_encoder(run: Run, command: str) -> LatentEncoder:
    codecs = {}
    for cid in ("V_x", "V_p", "V_cmpas"):
        with Stage(command, f"load-codec/{cid}"):
            codecs[cid] = load_codec(_codec_ckpt(run, cid))
    return LatentEncoder(codecs)


@cli.command("train-dit")
@click.option("--steps", type=int, default=None)
@click.option("--resume", is_flag=True)
@click.pass_context
def train_dit_cmd(ctx, steps, resume):
    """Train the latent diffusion denoiser with the codecs frozen."""
    cfg = _resolve(ctx, **{"dit.steps": steps})
    d = cfg["dit"]
    with Run(cfg, "train-dit") as run:
        man, stats = run.manifest(), run.stats()
        encoder = _load_encoder(run, "train-dit")
        with Stage("train-dit", "latents"):
            encoder.fit_scales({cid: codec_inputs(man, stats, cid, "train")
                                for cid in ("V_x", "V_p", "V_cmpas")})
            cond, target, _ = diffusion_dataset(man, stats, encoder, "train")
        dcfg = C.dit_config(cfg)
        torch.manual_seed(cfg["seed"])
        model = DiT(dcfg)
        opt = torch.optim.AdamW(model.parameters(), lr=d["lr"], weight_decay=0.0)
        gen = torch.Generator().manual_seed(cfg["seed"])
        start = 0
        path = _dit_ckpt(run)
        arch = {"dit": dcfg.to_dict(), "T": d["T"]}
        if resume:
            with Stage("train-dit", "resume"):
                payload = read_checkpoint(path, "dit")
                load_params(model, payload, arch)
                opt.load_state_dict(payload["optimizer"])
                gen.set_state(payload["metadata"]["rng_state"])
                start = payload["metadata"]["step"]
        schedule = NoiseSchedule.linear(d["T"])

        def save(step):
            save_checkpoint(path, "dit", {**arch, "scales": encoder.scales}, model, opt,
                            {"step": step, "rng_state": gen.get_state()}, arch=arch)

        fh, out = _loss_writer(run.dir / "loss.csv", ["step", "loss", "mse", "vb"], append=resume)

        def callback(step, parts, optimizer, g):
            out.writerow([start + step, f"{parts['loss']:.6g}", f"{parts['mse']:.6g}",
                          f"{parts['vb']:.6g}"])
            if (start + step) % d["checkpoint_every"] == 0:
                save(start + step)

        with fh, Stage("train-dit", "optimise"):
            _, losses, _ = run_dit_training(model, schedule, cond, target, max(d["steps"] - start, 0),
                                            d["batch_size"], d["lr"], cfg["seed"], opt, gen, callback)
            save(max(d["steps"], start))
        if losses:
            click.echo(f"dit: {start + len(losses)} steps, loss {np.mean(losses[-20:]):.4g}")


# inference -------------------------------------------------------------------

@cli.command("forecast")
@click.option("--init", "init", required=True, help="Initialization time, YYYY-MM-DDTHH.")
@click.option("--lead", type=int, required=True, help="Lead time in hours (1-120).")
@click.option("--force", is_flag=True, help="Overwrite an existing archive.")
@click.pass_context
def forecast_cmd(ctx, init, lead, force):
    """Roll the lead-time models out to ``--lead`` hours and write an archive."""
    cfg = _resolve(ctx)
    try:
        t0 = parse_time(init)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    plan = greedy_plan(lead) if 1 <= lead <= 120 else None
    if plan is None:
        raise UserError(f"lead must be in [1, 120], got {lead}")
    with Run(cfg, "forecast") as run:
        man, stats = run.manifest(), run.stats()
        log.info("plan %s", list(plan.steps))
        click.echo(f"plan {list(plan.steps)}")
        models = {}
        for step in sorted(set(plan.steps)):
            with Stage("forecast", f"load-{step}h"):
                models[step] = load_forecaster(_forecaster_ckpt(run, step))
        width = models[plan.steps[0]].cfg.boundary_width
        with Stage("forecast", "rollout"):
            x0 = WeatherState(man.read("state", t0), t0)
            steps = rollout(models, x0, StoreBoundaryProvider(man, stats, width), lead, stats,
                            normalize_topography(man.topography()))
        with Stage("forecast", "write"):
            archive = run.dir / "archive"
            if (archive / "manifest.json").exists() and not force:
                raise UserError(f"{archive} exists; pass --force to overwrite")
            write_forecast_archive(archive, man.grid, man.inventory, t0, plan, steps, force=True)
        click.echo(f"forecast {format_time(t0)} +{lead}h -> {archive}")


def _load_diagnoser(run: Run, man: DatasetManifest, stats: NormStats) -> PrecipDiagnoser:
    encoder = _load_encoder(run, "diagnose-precip")
    with Stage("diagnose-precip", "load-dit"):
        payload = read_checkpoint(_dit_ckpt(run), "dit")
        dcfg = DiTConfig(**{k: tuple(v) if isinstance(v, list) else v
                            for k, v in payload["config"]["dit"].items()})
        model = DiT(dcfg)
        load_params(model, payload, {"dit": dcfg.to_dict(), "T": payload["config"]["T"]})
        encoder.scales = dict(payload["config"]["scales"])
    return PrecipDiagnoser(encoder, model.eval(), NoiseSchedule.linear(payload["config"]["T"]),
                           stats, man.grid, man.precip_crop_lat)


@cli.command("diagnose-precip")
@click.option("--time", "when", required=True, help="Valid time, YYYY-MM-DDTHH.")
@click.option("--members", type=int, default=None, help="Ensemble members (default 3).")
@click.option("--state-from", type=click.Path(), default=None,
              help="Forecast archive supplying X_t (default: the dataset).")
@click.pass_context
def diagnose_cmd(ctx, when, members, state_from):
    """Diagnose hourly precipitation at ``--time`` with an EnMax ensemble."""
    cfg = _resolve(ctx, **{"diagnose.members": members})
    try:
        t = parse_time(when)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    with Run(cfg, "diagnose-precip") as run:
        man, stats = run.manifest(), run.stats()
        diag = _load_diagnoser(run, man, stats)
        with Stage("diagnose-precip", "inputs"):
            src = DatasetManifest.open(state_from) if state_from else man
            state = src.read("state", t)
            tp = man.read("tp", t)
            prev = man.read("cmpas", t - HOUR)
        with Stage("diagnose-precip", "sample"):
            n = cfg["diagnose"]["members"]
            fields = diag.members(state, tp, prev, n, cfg["seed"], cfg["diagnose"]["sample_steps"])
            combined = enmax(fields)
        out = run.dir / f"precip_{format_time(t)}"
        write_diagnosis(out, man, t, combined, fields, cfg["seed"],
                        cfg["diagnose"]["sample_steps"], force=True)
        click.echo(f"{n} members, EnMax max {combined.max():.3g} mm/h -> {out}")


@cli.command("evaluate")
@click.option("--forecast", "forecast_dir", type=click.Path(), default=None,
              help="Forecast archive (default: the last forecast run).")
@click.option("--init", "init", default=None,
              help="Init time when the archive carries none (e.g. truth-vs-truth).")
@click.option("--precip", "precip_files", type=click.Path(), multiple=True,
              help="Diagnosed precipitation store(s) to score against observations.")
@click.option("--output", type=click.Path(), default=None, help="Metric table path.")
@click.pass_context
def evaluate_cmd(ctx, forecast_dir, init, precip_files, output):
    """Write the per-variable, per-lead RMSE/ACC (and TS/POD/FAR) table."""
    cfg = _resolve(ctx)
    e = cfg["evaluate"]
    with Run(cfg, "evaluate") as run:
        truth = run.manifest()
        fdir = Path(forecast_dir) if forecast_dir else run.workdir / "runs" / "forecast" / "archive"
        with Stage("evaluate", "load"):
            fc = DatasetManifest.open(fdir)
            t0 = parse_time(init) if init else parse_time(fc.tags["init"]) if "init" in fc.tags \
                else None
            if t0 is None:
                raise UserError("archive has no init time; pass --init")
            leads = {int(round((t - t0) / HOUR)): t for t in fc.timestamps if t > t0}
            if e["leads"]:
                leads = {k: v for k, v in leads.items() if k in e["leads"]}
            forecasts = {k: [(t, fc.read("state", t))] for k, t in leads.items()}
            inv = truth.inventory
            variables = e["variables"] or (list(inv.surface_vars) +
                                           [f"{v}500" for v in inv.pressure_vars
                                            if 500 in inv.pressure_levels])
            clim = run.climatology() if e["acc_mode"] == "climatology" else None

        def truth_at(t):
            if not truth.has(t):
                raise KeyError(t)
            return truth.read("state", t)

        with Stage("evaluate", "metrics"):
            rows, coverage = evaluate_rollout(forecasts, truth_at, clim, variables, sorted(leads),
                                              truth.inventory.channel_names, truth.grid.latitudes,
                                              e["normalize_weights"], e["acc_mode"])
            pairs = []
            for p in precip_files:
                diag = DatasetManifest.open(p)
                pairs += [(diag.read("cmpas", t), truth.read("cmpas", t)) for t in diag.timestamps]
            if pairs:
                rows += evaluate_precipitation(pairs, 0, tuple(e["thresholds"]))
        if coverage < 1.0:
            click.echo(f"warning: truth coverage {coverage:.1%}", err=True)
        path = Path(output) if output else run.dir / "metrics.csv"
        write_table(rows, path)
        click.echo(f"{len(rows)} rows (coverage {coverage:.0%}) -> {path}")


@cli.command("plot")
@click.option("--table", type=click.Path(), default=None, help="Metric table (default: last evaluate).")
@click.option("--variable", "variables", multiple=True, help="Variables to plot (default: all).")
@click.option("--lead", "leads", type=int, multiple=True, help="Leads for field maps.")
@click.option("--forecast", "forecast_dir", type=click.Path(), default=None,
              help="Forecast archive for field maps (default: the last forecast run).")
@click.pass_context
def plot_cmd(ctx, table, variables, leads, forecast_dir):
    """RMSE/ACC-vs-lead curves per variable and forecast/truth/difference maps."""
    cfg = _resolve(ctx)
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with Run(cfg, "plot") as run:
        path = Path(table) if table else run.workdir / "runs" / "evaluate" / "metrics.csv"
        if not path.exists():
            raise UserError(f"metric table {path} not found")
        rows = [r for r in read_table(path) if r.metric in ("rmse", "acc")]
        if not rows:
            raise UserError(f"{path} has no RMSE/ACC rows to plot")
        variables = list(variables) or sorted({r.variable for r in rows})
        images = []
        for var in variables:
            sel = [r for r in rows if r.variable == var]
            if not sel:
                raise UserError(f"no rows for variable {var!r}")
            fig, axes = plt.subplots(1, 2, figsize=(8, 3))
            for ax, metric in zip(axes, ("rmse", "acc")):
                pts = sorted((r.lead_hours, r.value) for r in sel if r.metric == metric)
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o")
                ax.set_xlabel("lead (h)")
                ax.set_title(f"{var} {metric.upper()}")
            fig.tight_layout()
            out = run.dir / f"curve_{var}.png"
            fig.savefig(out, dpi=80)
            plt.close(fig)
            images.append(out)
        if leads:
            fdir = Path(forecast_dir) if forecast_dir else \
                run.workdir / "runs" / "forecast" / "archive"
            truth = run.manifest()
            fc = DatasetManifest.open(fdir)
            t0 = parse_time(fc.tags["init"])
            for var in variables:
                c = truth.inventory.channel_names.index(var)
                for lead in leads:
                    t = t0 + lead * HOUR
                    if not fc.has(t):
                        raise UserError(f"forecast archive has no {lead}h field")
                    a, b = fc.read("state", t)[c], truth.read("state", t)[c]
                    fig, axes = plt.subplots(1, 3, figsize=(11, 3))
                    for ax, f, title in zip(axes, (a, b, a - b), ("forecast", "truth", "difference")):
                        im = ax.imshow(f, origin="lower", cmap="RdBu_r" if title == "difference"
                                       else "viridis")
                        ax.set_title(f"{var} +{lead}h {title}")
                        fig.colorbar(im, ax=ax, shrink=0.8)
                    fig.tight_layout()
                    out = run.dir / f"map_{var}_{lead}h.png"
                    fig.savefig(out, dpi=80)
                    plt.close(fig)
                    images.append(out)
        click.echo(f"{len(images)} images -> {run.dir}")


def main():
    cli()


if __name__ == "__main__":
    main()
