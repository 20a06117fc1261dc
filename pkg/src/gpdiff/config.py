"""Flat ``key = value`` configuration files, CSV arrays and run manifests."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import platform
from pathlib import Path

import numpy as np
import scipy

from . import __version__, rng
from .gp import GpSpec, random_spd

SPEC_KEYS = {"d", "N", "nu", "ell", "kernel_mode", "r", "period", "sigma_file", "mu_file",
             "sigma_seed", "sigma_ridge"}


class ConfigError(ValueError):
    pass


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def write_csv(path, array) -> None:
    a = np.atleast_2d(np.asarray(array, dtype=np.float64))
    np.savetxt(path, a, fmt="%.17g", delimiter=",")


def read_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2))


def spec_from_config(path) -> GpSpec:
    """Build a :class:`GpSpec`; ``sigma_file``/``mu_file`` are relative to the config file.

    Without ``sigma_file``, ``sigma_seed`` draws ``A^T A + sigma_ridge I``;
    with neither, ``Sigma = I``.  Without ``mu_file`` the mean is zero.
    """
    cfg = read_config(path)
    unknown = set(cfg) - SPEC_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("d", "N"):
        if key not in cfg:
            raise ConfigError(f"missing required key {key!r}")
    base = Path(path).parent
    try:
        d, N = int(cfg["d"]), int(cfg["N"])
        if "sigma_file" in cfg:
            sigma = read_csv(base / cfg["sigma_file"])
        elif "sigma_seed" in cfg:
            seed = int(cfg["sigma_seed"])
            sigma = random_spd(d, rng.seed_split(seed, rng.STREAM_SIGMA), float(cfg.get("sigma_ridge", 0.0)))
        else:
            sigma = np.eye(d)
        mu = read_csv(base / cfg["mu_file"]) if "mu_file" in cfg else None
        return GpSpec(
            d=d, N=N, sigma=sigma, mu=mu,
            nu=float(cfg.get("nu", 1.0)), ell=float(cfg.get("ell", 1.0)),
            kernel_mode=cfg.get("kernel_mode", "index"), r=float(cfg.get("r", 1.0)),
            period=float(cfg["period"]) if "period" in cfg else None,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc


def write_spec_config(path, spec: GpSpec) -> None:
    """Write ``spec`` as a config plus ``<stem>.sigma.csv`` and ``<stem>.mu.csv`` next to it."""
    path = Path(path)
    sig, mu = path.with_suffix(".sigma.csv"), path.with_suffix(".mu.csv")
    write_csv(sig, spec.sigma)
    write_csv(mu, spec.mu)
    lines = [f"d = {spec.d}", f"N = {spec.N}", f"nu = {spec.nu!r}", f"ell = {spec.ell!r}",
             f"kernel_mode = {spec.kernel_mode}", f"r = {spec.r!r}", f"period = {spec.period!r}",
             f"sigma_file = {sig.name}", f"mu_file = {mu.name}"]
    path.write_text("\n".join(lines) + "\n")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + ".manifest.json")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """Records inputs, versions and output digests of one CLI run."""

    def __init__(self, command: str, spec: GpSpec | None, seed: int | None, params: dict):
        self.data = {
            "command": command,
            "config_hash": None if spec is None else spec.digest(),
            "seed": seed,
            "params": params,
            "versions": {"gpdiff": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "started": _now(),
            "outputs": {},
        }

    def add_output(self, path) -> None:
        self.data["outputs"][Path(path).name] = file_digest(path)

    def write(self, path) -> Path:
        self.data["finished"] = _now()
        target = manifest_path(path)
        target.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        return target
