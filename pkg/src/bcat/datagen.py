"""Synthetic 2-D periodic field trajectories with known ground truth.

Three families on the periodic square [0, 2*pi)^2:

* ``adv_diff``: sum of advected, diffusing Fourier modes (closed form).
* ``linear_swe``: plane waves of the shallow-water equations linearized about
  rest depth H0, channels (h, u, v) (closed form).
* ``ins_vorticity``: incompressible Navier-Stokes in vorticity-streamfunction
  form, pseudo-spectral with 2/3 dealiasing and RK4 substeps, channels (u, v, w).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .dataio import Trajectory, write_manifest, write_trajectory
from .rng import Rng, derive_seed

FAMILIES = ("adv_diff", "linear_swe", "ins_vorticity")
CHANNELS = {
    "adv_diff": ["c"],
    "linear_swe": ["h", "u", "v"],
    "ins_vorticity": ["u", "v", "w"],
}
MAX_MODES = 8
CFL_LIMIT = 0.5


class StabilityError(ValueError):
    pass


@dataclass
class GenSpec:
    family: str = "adv_diff"
    resolution: int = 32
    n_frames: int = 20
    dt: float = 0.1
    viscosity: float = 0.01
    velocity: tuple[float, float] = (1.0, 0.5)
    gh0: float = 1.0
    depth: float = 1.0
    n_modes: int = 4
    max_wavenumber: int = 3
    rms_range: tuple[float, float] = (0.5, 2.0)
    seed: int = 0
    # explicit mode list [(kx, ky, amplitude, phase), ...]; drawn from the seed if None
    modes: list | None = None
    # ins_vorticity initial condition: "random", "taylor_green" or "zero"
    init: str = "random"
    # ins_vorticity RK4 substeps per stored frame; chosen from the CFL bound if None
    substeps: int | None = None

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        r = self.resolution
        if r < 16 or r > 128 or r & (r - 1):
            raise ValueError(f"resolution must be a power of two in [16, 128], got {r}")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.viscosity < 0:
            raise ValueError("viscosity must be >= 0")
        if self.gh0 <= 0 or self.depth <= 0:
            raise ValueError("gh0 and depth must be positive")
        if not 1 <= self.n_modes <= MAX_MODES:
            raise ValueError(f"n_modes must be in [1, {MAX_MODES}]")
        if self.modes is not None and len(self.modes) > MAX_MODES + 1:
            raise ValueError("too many explicit modes")
        if self.family == "ins_vorticity" and self.viscosity <= 0:
            raise ValueError("ins_vorticity requires viscosity > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["velocity"] = list(self.velocity)
        d["rms_range"] = list(self.rms_range)
        return d


def grid(resolution: int) -> tuple[np.ndarray, np.ndarray, float]:
    dx = 2.0 * np.pi / resolution
    x = np.arange(resolution) * dx
    xx, yy = np.meshgrid(x, x, indexing="ij")
    return xx, yy, dx


def _draw_modes(rng: Rng, n: int, kmax: int) -> list[tuple[int, int, float, float]]:
    modes = []
    used = set()
    while len(modes) < n:
        kx, ky = rng.integers(-kmax, kmax + 1), rng.integers(-kmax, kmax + 1)
        # (k, -k) give the same cosine family; keep one representative
        if (kx, ky) == (0, 0) or (kx, ky) in used or (-kx, -ky) in used:
            continue
        used.add((kx, ky))
        modes.append((kx, ky, rng.normal(), rng.uniform(0.0, 2.0 * np.pi)))
    return modes


def _rescale(modes, scale):
    return [(kx, ky, float(a * scale), ph) for kx, ky, a, ph in modes]


def _random_modes(spec: GenSpec, rng: Rng, with_offset: bool) -> list:
    """Modes whose t=0 field RMS (about the offset) lands in ``spec.rms_range``."""
    modes = _draw_modes(rng, spec.n_modes, spec.max_wavenumber)
    xx, yy, _ = grid(spec.resolution)
    field0 = sum(a * np.cos(kx * xx + ky * yy + ph) for kx, ky, a, ph in modes)
    target = rng.uniform(*spec.rms_range)
    modes = _rescale(modes, target / np.sqrt(np.mean(field0 ** 2)))
    if with_offset:
        modes.append((0, 0, rng.uniform(-1.0, 1.0), 0.0))
    return modes


# ----------------------------------------------------------------------------
# closed-form families


def adv_diff_field(modes, t: float, xx, yy, velocity, viscosity) -> np.ndarray:
    """c(x, t) = sum_k A cos(k.x - (k.a) t + phi) exp(-nu |k|^2 t), float64."""
    a, b = velocity
    out = np.zeros_like(xx)
    for kx, ky, amp, ph in modes:
        decay = math.exp(-viscosity * (kx * kx + ky * ky) * t)
        out += amp * decay * np.cos(kx * xx + ky * yy - (kx * a + ky * b) * t + ph)
    return out


def gen_adv_diff(spec: GenSpec) -> Trajectory:
    spec.validate()
    if spec.family != "adv_diff":
        raise ValueError("gen_adv_diff needs family 'adv_diff'")
    rng = Rng(spec.seed)
    modes = [tuple(m) for m in spec.modes] if spec.modes is not None else _random_modes(spec, rng, True)
    xx, yy, dx = grid(spec.resolution)
    frames = np.stack([
        adv_diff_field(modes, i * spec.dt, xx, yy, spec.velocity, spec.viscosity)
        for i in range(spec.n_frames)
    ])[..., None]
    return Trajectory(frames.astype(np.float32), spec.dt, dx, list(CHANNELS["adv_diff"]), 1,
                      family="adv_diff", seed=spec.seed, meta={"modes": modes, "spec": spec.to_dict()})


def linear_swe_fields(waves, t: float, xx, yy, gh0: float, depth: float) -> np.ndarray:
    """(h, u, v) of superposed plane waves, omega = sqrt(g H0) |k|; float64 [H, W, 3]."""
    g = gh0 / depth
    c0 = math.sqrt(gh0)
    h = np.full_like(xx, depth)
    u = np.zeros_like(xx)
    v = np.zeros_like(xx)
    for kx, ky, amp, ph in waves:
        kn = math.hypot(kx, ky)
        if kn == 0:
            continue
        omega = c0 * kn
        c = np.cos(kx * xx + ky * yy - omega * t + ph)
        h += amp * c
        u += (g * amp * kx / omega) * c
        v += (g * amp * ky / omega) * c
    return np.stack([h, u, v], axis=-1)


def gen_linear_swe(spec: GenSpec) -> Trajectory:
    spec.validate()
    if spec.family != "linear_swe":
        raise ValueError("gen_linear_swe needs family 'linear_swe'")
    rng = Rng(spec.seed)
    if spec.modes is not None:
        waves = [tuple(m) for m in spec.modes]
    else:
        # keep the depth perturbation small relative to H0
        waves = _random_modes(replace(spec, rms_range=(0.05 * spec.depth, 0.2 * spec.depth)), rng, False)
    xx, yy, dx = grid(spec.resolution)
    frames = np.stack([linear_swe_fields(waves, i * spec.dt, xx, yy, spec.gh0, spec.depth)
                       for i in range(spec.n_frames)])
    return Trajectory(frames.astype(np.float32), spec.dt, dx, list(CHANNELS["linear_swe"]), 3,
                      family="linear_swe", seed=spec.seed, meta={"modes": waves, "spec": spec.to_dict()})


# ----------------------------------------------------------------------------
# pseudo-spectral incompressible Navier-Stokes


class VorticitySolver:
    """dw/dt + u.grad(w) = nu lap(w), u = (psi_y, -psi_x), lap(psi) = -w."""

    def __init__(self, resolution: int, viscosity: float):
        self.n = resolution
        self.nu = viscosity
        k = np.fft.fftfreq(resolution, d=1.0 / resolution)
        self.kx, self.ky = np.meshgrid(k, k, indexing="ij")
        self.k2 = self.kx ** 2 + self.ky ** 2
        self.inv_k2 = np.where(self.k2 > 0, 1.0 / np.where(self.k2 > 0, self.k2, 1.0), 0.0)
        kcut = resolution / 3.0
        self.dealias = (np.abs(self.kx) < kcut) & (np.abs(self.ky) < kcut)
        self.dx = 2.0 * np.pi / resolution

    def velocity_hat(self, w_hat):
        psi_hat = w_hat * self.inv_k2
        return 1j * self.ky * psi_hat, -1j * self.kx * psi_hat

    def velocity(self, w_hat):
        u_hat, v_hat = self.velocity_hat(w_hat)
        return np.fft.ifft2(u_hat).real, np.fft.ifft2(v_hat).real

    def rhs(self, w_hat):
        u, v = self.velocity(w_hat)
        wx = np.fft.ifft2(1j * self.kx * w_hat).real
        wy = np.fft.ifft2(1j * self.ky * w_hat).real
        adv_hat = np.fft.fft2(u * wx + v * wy) * self.dealias
        return -adv_hat - self.nu * self.k2 * w_hat

    def rk4(self, w_hat, h):
        k1 = self.rhs(w_hat)
        k2 = self.rhs(w_hat + 0.5 * h * k1)
        k3 = self.rhs(w_hat + 0.5 * h * k2)
        k4 = self.rhs(w_hat + h * k3)
        return w_hat + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def max_stable_step(self, w_hat) -> float:
        u, v = self.velocity(w_hat)
        umax = float(np.max(np.hypot(u, v)))
        limits = [CFL_LIMIT * self.dx / umax] if umax > 0 else []
        if self.nu > 0:
            # RK4 real-axis stability limit is ~2.78
            limits.append(2.5 / (self.nu * float(self.k2.max())))
        return min(limits) if limits else math.inf

    def divergence(self, u, v) -> float:
        d = 1j * self.kx * np.fft.fft2(u) + 1j * self.ky * np.fft.fft2(v)
        return float(np.max(np.abs(np.fft.ifft2(d).real)))


def kinetic_energy(u: np.ndarray, v: np.ndarray) -> float:
    return 0.5 * float(np.mean(u.astype(np.float64) ** 2 + v.astype(np.float64) ** 2))


def gen_ins_vorticity(spec: GenSpec) -> Trajectory:
    spec.validate()
    if spec.family != "ins_vorticity":
        raise ValueError("gen_ins_vorticity needs family 'ins_vorticity'")
    xx, yy, dx = grid(spec.resolution)
    solver = VorticitySolver(spec.resolution, spec.viscosity)
    modes = None
    if spec.init == "taylor_green":
        w0 = 2.0 * np.cos(xx) * np.cos(yy)
    elif spec.init == "zero":
        w0 = np.zeros_like(xx)
    elif spec.init == "random":
        rng = Rng(spec.seed)
        modes = [tuple(m) for m in spec.modes] if spec.modes is not None else _random_modes(spec, rng, False)
        w0 = adv_diff_field(modes, 0.0, xx, yy, (0.0, 0.0), 0.0)
    else:
        raise ValueError(f"unknown init {spec.init!r}")
    w_hat = np.fft.fft2(w0)
    w_hat[0, 0] = 0.0  # zero-mean vorticity on the torus

    frames = []
    max_div = 0.0
    steps_used = []
    for i in range(spec.n_frames):
        if i > 0:
            limit = solver.max_stable_step(w_hat)
            if spec.substeps is not None:
                n_sub = spec.substeps
                if spec.dt / n_sub > limit:
                    raise StabilityError(
                        f"substeps={n_sub} gives step {spec.dt / n_sub:.3g} above the stable limit "
                        f"{limit:.3g} (CFL {CFL_LIMIT}) at frame {i}")
            else:
                n_sub = max(1, math.ceil(spec.dt / limit))
            steps_used.append(n_sub)
            for _ in range(n_sub):
                w_hat = solver.rk4(w_hat, spec.dt / n_sub)
        u, v = solver.velocity(w_hat)
        w = np.fft.ifft2(w_hat).real
        max_div = max(max_div, solver.divergence(u, v))
        frames.append(np.stack([u, v, w], axis=-1))
    frames = np.stack(frames)
    meta = {"modes": modes, "spec": spec.to_dict(), "max_divergence": max_div,
            "substeps": steps_used, "frames64": frames}
    return Trajectory(frames.astype(np.float32), spec.dt, dx, list(CHANNELS["ins_vorticity"]), 3,
                      family="ins_vorticity", seed=spec.seed, meta=meta)


GENERATORS = {
    "adv_diff": gen_adv_diff,
    "linear_swe": gen_linear_swe,
    "ins_vorticity": gen_ins_vorticity,
}


def generate(spec: GenSpec) -> Trajectory:
    spec.validate()
    return GENERATORS[spec.family](spec)


def worker_count() -> int:
    n = int(os.environ.get("BCAT_THREADS", "0") or 0)
    return n if n > 0 else (os.cpu_count() or 1)


def make_dataset(template: GenSpec, n_traj: int, seed: int, out_dir, manifest_name: str = "manifest.json") -> Path:
    """Write ``n_traj`` BTRJ files plus a JSON manifest; returns the manifest path.

    Trajectory ``i`` uses seed ``splitmix64(seed + i)``, so output does not
    depend on worker count or completion order.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    template.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc

    def one(i: int) -> dict:
        s = derive_seed(seed, i)
        traj = generate(replace(template, seed=s))
        name = f"traj_{i:05d}.btrj"
        write_trajectory(traj, out_dir / name)
        return {"path": name, "seed": s, "frames": traj.n_frames,
                "resolution": traj.resolution, "channels": traj.valid_channels}

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        files = list(pool.map(one, range(n_traj)))
    params = template.to_dict()
    params.pop("seed")
    params["dataset_seed"] = seed
    path = out_dir / manifest_name
    write_manifest(path, template.family, files, params)
    return path
