"""Experiment configuration and the command dispatcher behind the CLI.

Every command resolves to an ExperimentConfig, runs deterministically from
(config, seed), and leaves the same artifact set in its output directory:
the resolved config.ini, metrics.jsonl ({step, name, value} per line),
summary.csv, status.json, plus command-specific files (checkpoint,
report.json, trajectory.csv, arrays).
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import apply_checkpoint, load_checkpoint, save_checkpoint
from .datasets import array_digest, dataset_generate, load_idx
from .errors import ContractError
from .models import TRAINERS, TrainConfig, build_bundle
from .rng import RngStream

# field name -> (section, type); "opt_float" fields serialize only when set.
_FIELDS = {
    "command": ("run", str),
    "out": ("run", str),
    "seed": ("run", int),
    "dataset": ("data", str),
    "n": ("data", int),
    "idx_path": ("data", str),
    "data_path": ("data", str),
    "data_mode": ("data", str),
    "model": ("train", str),
    "latent": ("train", int),
    "hidden": ("train", int),
    "lam": ("train", float),
    "lr": ("train", float),
    "lr_enc": ("train", "opt_float"),
    "lr_gen": ("train", "opt_float"),
    "lr_disc": ("train", "opt_float"),
    "lr_code": ("train", "opt_float"),
    "iters": ("train", int),
    "batch": ("train", int),
    "visible": ("train", str),
    "recon": ("train", str),
    "generator_loss": ("train", str),
    "mc_samples": ("train", int),
    "log_every": ("train", int),
    "method": ("estimate", str),
    "num_z": ("estimate", int),
    "run": ("estimate", str),
    "ratio_iters": ("estimate", int),
    "ratio_hidden": ("estimate", int),
    "ratio_layers": ("estimate", int),
    "gmm_k": ("estimate", int),
    "gmm_iters": ("estimate", int),
    "ar_iters": ("estimate", int),
    "ar_hidden": ("estimate", int),
    "k": ("synth", int),
    "mode": ("synth", str),
    "synth_iters": ("synth", int),
    "samples": ("synth", int),
    "synth_log_every": ("synth", int),
    "low_n": ("diagnostics", int),
    "div_n": ("diagnostics", int),
}


@dataclass
class ExperimentConfig:
    command: str = ""
    out: str = "run_out"
    seed: int = 0
    dataset: str = "sprites"
    n: int = 1024
    idx_path: str = ""
    data_path: str = ""
    data_mode: str = "generate"
    model: str = "vae"
    latent: int = 16
    hidden: int = 256
    lam: float = 10.0
    lr: float = 1e-3
    lr_enc: float | None = None
    lr_gen: float | None = None
    lr_disc: float | None = None
    lr_code: float | None = None
    iters: int = 2000
    batch: int = 64
    visible: str = "bernoulli"
    recon: str = "loglik"
    generator_loss: str = "nonsat"
    mc_samples: int = 1
    log_every: int = 10
    method: str = "mc"
    num_z: int = 1024
    run: str = ""
    ratio_iters: int = 3000
    ratio_hidden: int = 128
    ratio_layers: int = 3
    gmm_k: int = 10
    gmm_iters: int = 50
    ar_iters: int = 2000
    ar_hidden: int = 32
    k: int = 10
    mode: str = "minimize"
    synth_iters: int = 20000
    samples: int = 10000
    synth_log_every: int = 100
    low_n: int = 64
    div_n: int = 64

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for name, (section, kind) in _FIELDS.items():
            value = getattr(self, name)
            if kind == "opt_float" and value is None:
                continue
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, name, repr(value) if isinstance(value, float)
                       else str(value))
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        parser.read_string(text)
        cfg = cls()
        for name, (section, kind) in _FIELDS.items():
            if not parser.has_option(section, name):
                continue
            raw = parser.get(section, name)
            if kind is int:
                value = int(raw)
            elif kind is float or kind == "opt_float":
                value = float(raw)
            else:
                value = raw
            setattr(cfg, name, value)
        return cfg

    def config_hash(self) -> bytes:
        return hashlib.sha256(self.to_ini().encode()).digest()

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            latent=self.latent, hidden=self.hidden, lam=self.lam,
            lr=self.lr, lr_enc=self.lr_enc, lr_gen=self.lr_gen,
            lr_disc=self.lr_disc, lr_code=self.lr_code, iters=self.iters,
            batch=self.batch, seed=self.seed, visible=self.visible,
            recon=self.recon, generator_loss=self.generator_loss,
            mc_samples=self.mc_samples, log_every=self.log_every)


_MODEL_PARTS = {
    "vae": ("enc", "gen"),
    "aae": ("enc", "gen", "code_disc"),
    "gan": ("gen", "data_disc"),
    "vgh": ("enc", "gen", "data_disc", "code_disc"),
    "vghpp": ("enc", "gen", "data_disc", "code_disc"),
}


def load_data(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.dataset == "idx":
        if not cfg.idx_path:
            raise ContractError("dataset 'idx' needs idx_path")
        data = load_idx(cfg.idx_path)
        return data.reshape(data.shape[0], -1) if data.ndim > 2 else data
    return dataset_generate(cfg.dataset, cfg.n, cfg.seed)


def _write_metrics(path: str, rows) -> None:
    with open(path, "w") as f:
        for r in rows:
            value = r["value"]
            if not np.isfinite(value):
                continue
            f.write(json.dumps({"step": int(r["step"]), "name": r["name"],
                                "value": float(value)}, sort_keys=True))
            f.write("\n")


def _write_summary(path: str, rows) -> None:
    last = {}
    order = []
    for r in rows:
        if r["name"] not in last:
            order.append(r["name"])
        last[r["name"]] = r["value"]
    with open(path, "w") as f:
        f.write("name,value\n")
        for name in order:
            value = last[name]
            if isinstance(value, str):
                f.write(f"{name},{value}\n")
            else:
                f.write(f"{name},{float(value)!r}\n")


def _finish(cfg: ExperimentConfig, rows, extra_summary: dict | None = None):
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.ini"), "w") as f:
        f.write(cfg.to_ini())
    _write_metrics(os.path.join(out, "metrics.jsonl"), rows)
    summary_rows = list(rows)
    if extra_summary:
        summary_rows += [{"step": 0, "name": k, "value": v}
                         for k, v in extra_summary.items()]
    _write_summary(os.path.join(out, "summary.csv"), summary_rows)


def load_run(run_dir: str):
    """Rebuild the bundle and data of a finished training run."""
    cfg_path = os.path.join(run_dir, "config.ini")
    if not os.path.exists(cfg_path):
        raise ContractError(f"{run_dir!r} has no config.ini")
    with open(cfg_path) as f:
        src = ExperimentConfig.from_ini(f.read())
    data = load_data(src)
    tc = src.train_config()
    bundle = build_bundle(tc, data.shape[1], RngStream(tc.seed).child("init"),
                          parts=_MODEL_PARTS[src.model])
    tensors, _ = load_checkpoint(os.path.join(run_dir, "checkpoint.dmvi"))
    apply_checkpoint(bundle, tensors)
    return bundle, data, src


# ---------------------------------------------------------------------------
# Command bodies. Each returns the metric rows plus a summary dict.


def _cmd_train(cfg: ExperimentConfig):
    data = load_data(cfg)
    if cfg.model not in TRAINERS:
        raise ContractError(f"unknown model {cfg.model!r}")
    bundle, log = TRAINERS[cfg.model](data, cfg.train_config())
    os.makedirs(cfg.out, exist_ok=True)
    save_checkpoint(os.path.join(cfg.out, "checkpoint.dmvi"),
                    {k: v.data for k, v in bundle.named_parameters().items()},
                    cfg.config_hash())
    return log.rows, {"data_digest": array_digest(data)}


def _cmd_estimate(cfg: ExperimentConfig):
    from . import estimators as est

    bundle, data, _src = load_run(cfg.run)
    rng = RngStream(cfg.seed).child("estimate")
    if bundle.encoder is None:
        raise ContractError(f"run {cfg.run!r} has no encoder to estimate from")
    if cfg.method == "mc":
        report = est.mc_marginal_kl(bundle, data, cfg.num_z, rng)
    elif cfg.method == "ratio":
        codes = est._sample_codes(bundle, data, cfg.num_z, rng.child("codes"))
        prior = est.StandardPrior(bundle.latent).sample(rng.child("prior"),
                                                        cfg.num_z)
        rcfg = est.RatioConfig(hidden=cfg.ratio_hidden, layers=cfg.ratio_layers,
                               iters=cfg.ratio_iters)
        report = est.ratio_kl(codes, prior, rcfg, rng.child("clf"))
    elif cfg.method == "gmm":
        codes = est._sample_codes(bundle, data, cfg.num_z, rng.child("codes"))
        model = est.gmm_fit(codes, cfg.gmm_k, cfg.gmm_iters, rng.child("fit"))
        report = est.density_model_kl(model, bundle, data, cfg.num_z,
                                      rng.child("eval"))
    elif cfg.method == "ar":
        codes = est._sample_codes(bundle, data, cfg.num_z, rng.child("codes"))
        model = est.ar_fit(codes, est.ArConfig(hidden=cfg.ar_hidden,
                                               iters=cfg.ar_iters),
                           rng.child("fit"))
        report = est.density_model_kl(model, bundle, data, cfg.num_z,
                                      rng.child("eval"))
    else:
        raise ContractError(f"unknown estimator {cfg.method!r}")
    payload = report.to_json(cfg.config_hash().hex())
    _write_json(cfg, "report.json", payload)
    rows = []
    if np.isfinite(report.value):
        rows.append({"step": 0, "name": f"kl_{cfg.method}",
                     "value": report.value})
    return rows, {"status_" + cfg.method: 1.0 if report.status == "ok" else 0.0}


def _cmd_surgery(cfg: ExperimentConfig):
    from .estimators import surgery_decompose

    bundle, data, _src = load_run(cfg.run)
    rng = RngStream(cfg.seed).child("surgery")
    parts = surgery_decompose(bundle, data, cfg.num_z, rng)
    _write_json(cfg, "report.json", parts)
    rows = [{"step": 0, "name": name, "value": parts[name]}
            for name in ("avg_kl", "marginal_kl", "mutual_info", "floor")]
    return rows, None


def _cmd_low_posterior(cfg: ExperimentConfig):
    from .diagnostics import low_posterior_samples

    bundle, data, _src = load_run(cfg.run)
    rng = RngStream(cfg.seed).child("low_posterior")
    result = low_posterior_samples(bundle, data, cfg.num_z, cfg.low_n, rng)
    os.makedirs(cfg.out, exist_ok=True)
    np.save(os.path.join(cfg.out, "latents.npy"), result["latents"])
    np.save(os.path.join(cfg.out, "decoded.npy"), result["decoded"])
    with open(os.path.join(cfg.out, "low_posterior.csv"), "w") as f:
        f.write("rank,log_q\n")
        for i, v in enumerate(result["log_q"]):
            f.write(f"{i},{float(v)!r}\n")
    rows = [{"step": i, "name": "log_q", "value": float(v)}
            for i, v in enumerate(result["log_q"])]
    return rows, None


def _cmd_diversity(cfg: ExperimentConfig):
    from .diagnostics import diversity

    bundle, data, _src = load_run(cfg.run)
    rng = RngStream(cfg.seed).child("diversity")
    z = rng.normal((cfg.div_n, bundle.latent))
    decoded = bundle.decode_mean(z).data
    score = diversity(decoded)
    _write_json(cfg, "report.json", {"diversity": score, "n": cfg.div_n})
    return [{"step": 0, "name": "diversity", "value": score}], None


def _cmd_synth(cfg: ExperimentConfig):
    from .synth_gauss import (make_task, run_estimation, run_minimization,
                              trajectory_csv)
    from .estimators import RatioConfig

    task = make_task(cfg.k, cfg.seed)
    if cfg.mode == "estimate":
        result = run_estimation(
            task, RatioConfig(hidden=cfg.ratio_hidden, layers=cfg.ratio_layers,
                              iters=cfg.ratio_iters),
            cfg.samples, RngStream(cfg.seed).child("synth_est"))
        _write_json(cfg, "report.json",
                    {"true_kl": result["true_kl"], "est_kl": result["est_kl"],
                     "k": cfg.k, "d": task.d})
        rows = [{"step": 0, "name": "true_kl", "value": result["true_kl"]},
                {"step": 0, "name": "est_kl", "value": result["est_kl"]}]
        return rows, None
    if cfg.mode == "minimize":
        result = run_minimization(task, cfg.synth_iters,
                                  log_every=cfg.synth_log_every)
        os.makedirs(cfg.out, exist_ok=True)
        with open(os.path.join(cfg.out, "trajectory.csv"), "w") as f:
            f.write(trajectory_csv(result["trajectory"]))
        _write_json(cfg, "report.json",
                    {"status": result["status"], "k": cfg.k, "d": task.d,
                     "initial_kl": result["initial_kl"],
                     "final_kl": result["final_kl"]})
        rows = []
        for r in result["trajectory"]:
            rows.append({"step": r["step"], "name": "true_kl",
                         "value": r["true_kl"]})
            rows.append({"step": r["step"], "name": "est_kl",
                         "value": r["est_kl"]})
        return rows, None
    raise ContractError(f"unknown synth mode {cfg.mode!r}")


def _cmd_dataset(cfg: ExperimentConfig):
    if cfg.data_mode == "generate":
        data = load_data(cfg)
        os.makedirs(cfg.out, exist_ok=True)
        np.save(os.path.join(cfg.out, "data.npy"), data)
        digest = array_digest(data)
        _write_json(cfg, "report.json",
                    {"kind": cfg.dataset, "shape": list(data.shape),
                     "digest": digest})
        return [], {"rows": float(data.shape[0])}
    if cfg.data_mode == "inspect":
        if not cfg.data_path:
            raise ContractError("inspect needs data_path")
        data = (load_idx(cfg.data_path) if cfg.data_path.endswith((".idx", ".gz", "-ubyte"))
                else np.load(cfg.data_path))
        info = {"shape": list(data.shape), "min": float(data.min()),
                "max": float(data.max()), "digest": array_digest(data)}
        _write_json(cfg, "report.json", info)
        print(json.dumps(info, sort_keys=True))
        return [], None
    raise ContractError(f"unknown dataset mode {cfg.data_mode!r}")


def _write_json(cfg: ExperimentConfig, name: str, payload: dict) -> None:
    os.makedirs(cfg.out, exist_ok=True)
    clean = {k: (None if isinstance(v, float) and not np.isfinite(v) else v)
             for k, v in payload.items()}
    with open(os.path.join(cfg.out, name), "w") as f:
        json.dump(clean, f, sort_keys=True, indent=1)
        f.write("\n")


_COMMANDS = {
    "train": _cmd_train,
    "estimate-kl": _cmd_estimate,
    "surgery": _cmd_surgery,
    "low-posterior": _cmd_low_posterior,
    "diversity": _cmd_diversity,
    "synth-gauss": _cmd_synth,
    "dataset": _cmd_dataset,
}


def execute(cfg: ExperimentConfig) -> str:
    """Run one command; artifacts land in cfg.out. Returns the out dir."""
    if cfg.command not in _COMMANDS:
        raise ContractError(f"unknown command {cfg.command!r}")
    rows, extra = _COMMANDS[cfg.command](cfg)
    _finish(cfg, rows, extra)
    _write_json(cfg, "status.json", {"status": "ok", "exit_code": 0})
    return cfg.out
