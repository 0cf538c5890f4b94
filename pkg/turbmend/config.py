"""Tunables for every stage, with the published defaults baked in.

A config file is flat TOML whose keys are exactly the ``PipelineConfig``
field names, e.g.::

    middle_loop = 2
    mu1 = 0.4
    deconv_preset = "real"
"""
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import NamedTuple

from .exceptions import ConfigurationError


class GraphConfig(NamedTuple):
    patch: int = 5
    window: int = 21
    k: int = 10
    h: float = 0.15


class RegistrationConfig(NamedTuple):
    spacing: int = 16
    levels: int = 3
    beta: float = 0.01
    max_iter: int = 100
    initial_step: float = 0.5
    min_step: float = 1e-3
    tol: float = 1e-6
    divergence_patience: int = 10
    invert_iters: int = 20


class VariationalConfig(NamedTuple):
    lambda1: float = 0.02
    lambda2: float = 0.02
    mu1: float = 0.5
    mu2: float = 0.25
    delta: float = 1.0
    middle_loop: int = 3
    inner_loop: int = 10
    rof_iters: int = 50
    rof_tol: float = 1e-6
    early_exit_tol: float = 1e-4
    bregman_steps: int = 8
    residual_tol: float = 2e-4
    stall_tol: float = 0.05
    intensity_scale: float = 255.0

    @property
    def admissible(self) -> bool:
        return 0 < 20 * self.lambda1 + 4 * self.lambda2 < 1


class FusionConfig(NamedTuple):
    patch: int = 13
    top_k: int = 10
    tau_e: float | None = None
    h: float = 2.4
    lambda_p: float = 1.0
    lambda_pp: float = 0.01
    sigma_n2: float = 2.0
    mu: float = 5.0
    asymmetric: bool = True
    intensity_scale: float = 255.0
    chunk: int = 4096

    @property
    def movement_threshold(self) -> float:
        # mean squared displacement of 0.5 px^2 per patch pixel
        return 0.5 * self.patch**2 if self.tau_e is None else self.tau_e


class SparsePrior(NamedTuple):
    l_t: float = 1.8525
    theta1: float = 2.7
    theta2: float = 6.1e-4

    @property
    def theta3(self) -> float:
        return self.theta1 * self.l_t - self.theta2 * self.l_t**2


class DeconvConfig(NamedTuple):
    kernel_width: int = 5
    kernel_height: int = 5
    noise_str: float = 0.03
    deblur_strength: float = 0.2
    gamma2: float = 1e-3
    alternations: int = 5
    prior: SparsePrior = SparsePrior()
    hqs_beta_start: float = 0.001
    hqs_beta_max: float = 2.048
    cg_iters: int = 100
    cg_tol: float = 1e-6
    kernel_iters: int = 300
    collapse_weight: float = 0.99
    collapse_residual: float = 0.01
    intensity_scale: float = 255.0

    @property
    def gamma1(self) -> float:
        return self.deblur_strength * self.noise_str


DECONV_PRESETS: dict[str, tuple[int, int, float, float]] = {
    "simulated": (5, 5, 0.03, 0.2),
    "real": (7, 7, 0.03, 0.5),
}


class TurbulenceConfig(NamedTuple):
    sigma_d2: float = 4.0
    d_g: int = 32
    sigma_n2: float = 3.0
    disc_radius: float = 2.0
    n_frames: int = 40
    rng_seed: int = 0
    blur_scale: float = 0.25

    def validate(self) -> "TurbulenceConfig":
        if self.sigma_d2 < 0 or self.sigma_n2 < 0:
            raise ConfigurationError("turbulence variances must be non-negative")
        if self.d_g < 4:
            raise ConfigurationError(f"control spacing d_g must be at least 4, got {self.d_g}")
        if self.disc_radius < 0:
            raise ConfigurationError("disc_radius must be non-negative")
        if self.n_frames < 1:
            raise ConfigurationError("n_frames must be at least 1")
        if self.blur_scale < 0:
            raise ConfigurationError("blur_scale must be non-negative")
        return self


TURBULENCE_PRESETS: dict[str, TurbulenceConfig] = {
    "identity": TurbulenceConfig(sigma_d2=0.0, d_g=32, sigma_n2=0.0, disc_radius=0.0),
    "weak": TurbulenceConfig(sigma_d2=4.0, d_g=32, sigma_n2=3.0),
    "strong": TurbulenceConfig(sigma_d2=10.0, d_g=16, sigma_n2=16.0),
}


def turbulence_preset(name: str, **overrides) -> TurbulenceConfig:
    try:
        preset = TURBULENCE_PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown turbulence preset {name!r}, expected one of {sorted(TURBULENCE_PRESETS)}")
    return preset._replace(**{k: v for k, v in overrides.items() if v is not None}).validate()


class PipelineConfig(NamedTuple):
    # registration
    registration_spacing: int = 16
    registration_levels: int = 3
    registration_beta: float = 0.01
    registration_max_iter: int = 100
    invert_iters: int = 20
    # nonlocal graph
    nltv_patch: int = 5
    nltv_window: int = 21
    nltv_k: int = 10
    nltv_h: float = 0.15
    # loops and variational weights
    out_loop: int = 1
    middle_loop: int = 3
    inner_loop: int = 10
    rof_iters: int = 50
    rof_tol: float = 1e-6
    early_exit_tol: float = 1e-4
    bregman_steps: int = 8
    residual_tol: float = 2e-4
    stall_tol: float = 0.05
    lambda1: float = 0.02
    lambda2: float = 0.02
    mu1: float = 0.5
    mu2: float = 0.25
    delta: float = 1.0
    variational_scale: float = 255.0
    # low-rank reference
    rpca_tol: float = 1e-7
    rpca_max_iter: int = 500
    # fusion
    L: int = 13
    top_k: int = 10
    tau_e: float | None = None
    kernel_h: float = 2.4
    lambda_p: float = 1.0
    lambda_pp: float = 0.01
    sigma_n2: float = 2.0
    fusion_mu: float = 5.0
    asymmetric: bool = True
    # deconvolution
    deconv_preset: str = "simulated"
    kernelWidth: int = 5
    kernelHeight: int = 5
    noiseStr: float = 0.03
    deblurStrength: float = 0.2
    deconv_alternations: int = 5
    # run
    seed: int = 0
    threads: int = 0

    def validate(self) -> "PipelineConfig":
        if not 0 < 20 * self.lambda1 + 4 * self.lambda2 < 1:
            raise ConfigurationError(
                f"lambda1={self.lambda1}, lambda2={self.lambda2} violate 0 < 20*lambda1 + 4*lambda2 < 1"
            )
        if self.mu1 < 0 or self.mu2 < 0:
            raise ConfigurationError("mu1 and mu2 must be non-negative")
        for name in ("out_loop", "middle_loop", "inner_loop", "rof_iters", "bregman_steps", "registration_levels",
                     "deconv_alternations"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1, got {getattr(self, name)}")
        for name in ("nltv_patch", "nltv_window", "L"):
            value = getattr(self, name)
            if value < 1 or value % 2 == 0:
                raise ConfigurationError(f"{name} must be a positive odd size, got {value}")
        if self.nltv_patch > self.nltv_window:
            raise ConfigurationError("nltv_patch must not exceed nltv_window")
        if self.deconv_preset not in (*DECONV_PRESETS, "custom"):
            raise ConfigurationError(f"unknown deconv_preset {self.deconv_preset!r}")
        width, height, noise, strength = self.deconv_knobs()
        if width % 2 == 0 or height % 2 == 0 or width < 1 or height < 1:
            raise ConfigurationError("kernelWidth and kernelHeight must be positive odd sizes")
        if not (noise > 0 and strength > 0):
            raise ConfigurationError("noiseStr and deblurStrength must be positive")
        if self.residual_tol < 0 or self.stall_tol < 0:
            raise ConfigurationError("residual_tol and stall_tol must be non-negative")
        if self.threads < 0:
            raise ConfigurationError("threads must be non-negative")
        return self

    def deconv_knobs(self) -> tuple[int, int, float, float]:
        if self.deconv_preset == "custom":
            return self.kernelWidth, self.kernelHeight, self.noiseStr, self.deblurStrength
        return DECONV_PRESETS[self.deconv_preset]

    def graph(self) -> GraphConfig:
        return GraphConfig(patch=self.nltv_patch, window=self.nltv_window, k=self.nltv_k, h=self.nltv_h)

    def registration(self) -> RegistrationConfig:
        return RegistrationConfig(
            spacing=self.registration_spacing,
            levels=self.registration_levels,
            beta=self.registration_beta,
            max_iter=self.registration_max_iter,
            invert_iters=self.invert_iters,
        )

    def variational(self) -> VariationalConfig:
        return VariationalConfig(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            mu1=self.mu1,
            mu2=self.mu2,
            delta=self.delta,
            middle_loop=self.middle_loop,
            inner_loop=self.inner_loop,
            rof_iters=self.rof_iters,
            rof_tol=self.rof_tol,
            early_exit_tol=self.early_exit_tol,
            bregman_steps=self.bregman_steps,
            residual_tol=self.residual_tol,
            stall_tol=self.stall_tol,
            intensity_scale=self.variational_scale,
        )

    def fusion(self) -> FusionConfig:
        return FusionConfig(
            patch=self.L,
            top_k=self.top_k,
            tau_e=self.tau_e,
            h=self.kernel_h,
            lambda_p=self.lambda_p,
            lambda_pp=self.lambda_pp,
            sigma_n2=self.sigma_n2,
            mu=self.fusion_mu,
            asymmetric=self.asymmetric,
        )

    def deconv(self) -> DeconvConfig:
        width, height, noise, strength = self.deconv_knobs()
        return DeconvConfig(
            kernel_width=width,
            kernel_height=height,
            noise_str=noise,
            deblur_strength=strength,
            alternations=self.deconv_alternations,
        )


def load_config(path: Path | str | None = None, **overrides) -> PipelineConfig:
    """Read a flat TOML config file on top of the defaults.

    Args:
        path: Config file, or None for defaults only.
        **overrides: Field values that win over the file (None values are ignored).

    Returns:
        A validated PipelineConfig.
    """
    values: dict = {}
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as f:
                values = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"cannot parse {path}: {e}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(values) - set(PipelineConfig._fields))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    defaults = PipelineConfig()
    coerced = {}
    for key, value in values.items():
        default = getattr(defaults, key)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigurationError(f"{key} must be true or false")
        elif isinstance(default, int) and not isinstance(value, int):
            raise ConfigurationError(f"{key} must be an integer, got {value!r}")
        elif isinstance(default, float) or (default is None and key == "tau_e"):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigurationError(f"{key} must be a number, got {value!r}")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigurationError(f"{key} must be a string, got {value!r}")
        coerced[key] = value
    return defaults._replace(**coerced).validate()
