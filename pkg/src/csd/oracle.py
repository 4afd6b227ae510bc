"""Score oracles: noise-prediction (eps) interfaces with exact Gaussian-mixture
implementations and the guidance combinators.

The oracle contract everywhere in this package is the eps-parameterization:
an oracle answers "what standard-normal noise was mixed into x_t" rather than
the score itself. The two are related by eps = -sigma_t * grad log p_t, and
that conversion lives in :func:`gmm_eps` only.

Diagonal covariances keep the noised marginal closed-form: under the forward
process, N(mu, diag v) maps to N(alpha_t * mu, diag(alpha_t^2 * v + sigma_t^2)).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .schedule import NoiseSchedule, alpha_sigma

UNCONDITIONAL = "unconditional"
IMAGE = "image"
IMAGE_TEXT = "image_text"
CONDITION_KINDS = (UNCONDITIONAL, IMAGE, IMAGE_TEXT)


@dataclass(frozen=True)
class Condition:
    """What an eps query is conditioned on.

    A tagged value: nothing, a source image ref, or a (source image, text
    instruction) pair. Refs are opaque ids resolved by the oracle.
    """

    kind: str
    source_ref: str | None = None
    text_ref: str | None = None

    def __post_init__(self):
        if self.kind not in CONDITION_KINDS:
            raise ValueError(f"unknown condition kind {self.kind!r}")
        if self.kind == UNCONDITIONAL and (self.source_ref or self.text_ref):
            raise ValueError("unconditional condition carries no refs")
        if self.kind == IMAGE and (self.source_ref is None or self.text_ref is not None):
            raise ValueError("image condition needs source_ref and no text_ref")
        if self.kind == IMAGE_TEXT and (self.source_ref is None or self.text_ref is None):
            raise ValueError("image_text condition needs both source_ref and text_ref")

    @classmethod
    def unconditional(cls) -> "Condition":
        return cls(UNCONDITIONAL)

    @classmethod
    def image(cls, source_ref: str) -> "Condition":
        return cls(IMAGE, source_ref=source_ref)

    @classmethod
    def image_text(cls, source_ref: str, text_ref: str) -> "Condition":
        return cls(IMAGE_TEXT, source_ref=source_ref, text_ref=text_ref)

    def drop_text(self) -> "Condition":
        """The image-only condition with the same source ref."""
        if self.kind != IMAGE_TEXT:
            raise ValueError("drop_text applies to image_text conditions only")
        return Condition.image(self.source_ref)


@dataclass(frozen=True)
class GuidanceParams:
    """Guidance scales: omega_y for the text direction, omega_s for the source image."""

    omega_y: float = 7.5
    omega_s: float = 1.5

    def __post_init__(self):
        for name in ("omega_y", "omega_s"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of axis-aligned Gaussians: weights (k,), means (k, d), variances (k, d)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        v = np.atleast_2d(np.asarray(self.variances, dtype=float))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)
        if w.ndim != 1 or len(w) == 0:
            raise ValueError("weights must be a non-empty 1-d sequence")
        if np.any(w <= 0):
            raise ValueError("mixture weights must all be positive")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise ValueError(f"mixture weights must sum to 1 (got {w.sum()!r})")
        if m.shape != v.shape or m.shape[0] != len(w):
            raise ValueError(
                f"shape mismatch: weights {w.shape}, means {m.shape}, variances {v.shape}"
            )
        if np.any(v <= 0):
            raise ValueError("all variances must be > 0")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)


def _component_logpdfs(gmm: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """log N(x; mu_i, diag v_i) for every component, shape (k,)."""
    diff = x[None, :] - gmm.means
    return -0.5 * np.sum(diff * diff / gmm.variances + np.log(2.0 * np.pi * gmm.variances), axis=1)


def gmm_logpdf(gmm: GaussianMixture, x: np.ndarray) -> float:
    """log density of the mixture at x, log-sum-exp stabilized."""
    x = np.asarray(x, dtype=float)
    if x.shape != (gmm.dim,):
        raise ValueError(f"x has shape {x.shape}, mixture dimension is {gmm.dim}")
    a = np.log(gmm.weights) + _component_logpdfs(gmm, x)
    m = np.max(a)
    return float(m + np.log(np.sum(np.exp(a - m))))


def gmm_score(gmm: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """grad_x log p(x): responsibility-weighted sum of per-component scores."""
    x = np.asarray(x, dtype=float)
    if x.shape != (gmm.dim,):
        raise ValueError(f"x has shape {x.shape}, mixture dimension is {gmm.dim}")
    a = np.log(gmm.weights) + _component_logpdfs(gmm, x)
    a -= np.max(a)
    resp = np.exp(a)
    resp /= resp.sum()
    per_comp = (gmm.means - x[None, :]) / gmm.variances
    return resp @ per_comp


def gmm_marginal(gmm: GaussianMixture, schedule: NoiseSchedule, t: float) -> GaussianMixture:
    """The mixture of x_t when x_0 ~ gmm: means alpha*mu, variances alpha^2*v + sigma^2."""
    alpha, sigma = alpha_sigma(schedule, t)
    return GaussianMixture(
        weights=gmm.weights,
        means=alpha * gmm.means,
        variances=alpha * alpha * gmm.variances + sigma * sigma,
    )


def gmm_eps(gmm: GaussianMixture, schedule: NoiseSchedule, x_t: np.ndarray, t: float) -> np.ndarray:
    """Exact eps-prediction for a mixture prior: -sigma_t * grad log p_t(x_t).

    Undefined at sigma_t = 0 (there is no noise to predict).
    """
    _, sigma = alpha_sigma(schedule, t)
    if sigma <= 0.0:
        raise ValueError(f"eps-parameterization undefined at t={t} (sigma_t=0)")
    return -sigma * gmm_score(gmm_marginal(gmm, schedule, t), x_t)


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, omega_y: float) -> np.ndarray:
    """Classifier-free guidance: extrapolate from the unconditional estimate."""
    eps_uncond = np.asarray(eps_uncond, dtype=float)
    eps_cond = np.asarray(eps_cond, dtype=float)
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError("guidance branches must share shape")
    return eps_uncond + omega_y * (eps_cond - eps_uncond)


def ip2p_combine(
    eps_uncond: np.ndarray,
    eps_img: np.ndarray,
    eps_imgtxt: np.ndarray,
    g: GuidanceParams,
) -> np.ndarray:
    """Dual guidance over (source image, instruction):

    eps_uncond + omega_s*(eps_img - eps_uncond) + omega_y*(eps_imgtxt - eps_img)
    """
    eps_uncond = np.asarray(eps_uncond, dtype=float)
    eps_img = np.asarray(eps_img, dtype=float)
    eps_imgtxt = np.asarray(eps_imgtxt, dtype=float)
    if not (eps_uncond.shape == eps_img.shape == eps_imgtxt.shape):
        raise ValueError("guidance branches must share shape")
    return (
        eps_uncond
        + g.omega_s * (eps_img - eps_uncond)
        + g.omega_y * (eps_imgtxt - eps_img)
    )


@dataclass(frozen=True)
class EditOracle:
    """Three-way conditional mixture oracle: one mixture per guidance branch.

    ``image`` maps source_ref -> mixture; ``image_text`` maps
    (source_ref, text_ref) -> mixture. All mixtures share one dimension.
    Immutable after construction, safe for concurrent evaluation.
    """

    unconditional: GaussianMixture
    image: dict = field(default_factory=dict)
    image_text: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.unconditional.dim
        for ref, gmm in self.image.items():
            if gmm.dim != d:
                raise ValueError(f"image mixture {ref!r} has dim {gmm.dim}, expected {d}")
        for key, gmm in self.image_text.items():
            if gmm.dim != d:
                raise ValueError(f"image_text mixture {key!r} has dim {gmm.dim}, expected {d}")

    @property
    def dim(self) -> int:
        return self.unconditional.dim

    def branch(self, cond: Condition) -> GaussianMixture:
        """The mixture backing one guidance branch (raw access, for tests)."""
        if cond.kind == UNCONDITIONAL:
            return self.unconditional
        if cond.kind == IMAGE:
            try:
                return self.image[cond.source_ref]
            except KeyError:
                raise KeyError(f"no image-conditional mixture for source_ref={cond.source_ref!r}") from None
        try:
            return self.image_text[(cond.source_ref, cond.text_ref)]
        except KeyError:
            raise KeyError(
                f"no image_text mixture for (source_ref={cond.source_ref!r}, text_ref={cond.text_ref!r})"
            ) from None


def edit_oracle_eps(
    oracle: EditOracle,
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: float,
    cond: Condition,
    g: GuidanceParams,
) -> np.ndarray:
    """Combined eps-prediction under a condition and guidance scales.

    unconditional -> raw branch; image -> source-image guidance at omega_s;
    image_text -> full dual guidance.
    """
    if cond.kind == UNCONDITIONAL:
        return gmm_eps(oracle.unconditional, schedule, x_t, t)
    e_u = gmm_eps(oracle.unconditional, schedule, x_t, t)
    e_i = gmm_eps(oracle.branch(Condition.image(cond.source_ref)), schedule, x_t, t)
    if cond.kind == IMAGE:
        return cfg_combine(e_u, e_i, g.omega_s)
    e_it = gmm_eps(oracle.branch(cond), schedule, x_t, t)
    return ip2p_combine(e_u, e_i, e_it, g)


@dataclass(frozen=True)
class AnalyticOracle:
    """Binds an EditOracle to a schedule, exposing the callable eps interface
    expected by the distillation loops: eps(x_t, t, cond, guidance)."""

    oracle: EditOracle
    schedule: NoiseSchedule

    def __call__(self, x_t: np.ndarray, t: float, cond: Condition, g: GuidanceParams) -> np.ndarray:
        return edit_oracle_eps(self.oracle, self.schedule, x_t, t, cond, g)


def gmm_from_spec(spec: dict, path: str = "mixture") -> GaussianMixture:
    """Build a mixture from its JSON form {weights, means, variances}."""
    if not isinstance(spec, dict):
        raise ValueError(f"{path}: expected an object")
    extra = set(spec) - {"weights", "means", "variances"}
    if extra:
        raise ValueError(f"{path}: unknown keys {sorted(extra)}")
    try:
        return GaussianMixture(
            weights=np.asarray(spec["weights"], dtype=float),
            means=np.asarray(spec["means"], dtype=float),
            variances=np.asarray(spec["variances"], dtype=float),
        )
    except KeyError as e:
        raise ValueError(f"{path}: missing key {e.args[0]!r}") from None
    except (TypeError, ValueError) as e:
        raise ValueError(f"{path}: {e}") from None


def gmm_to_spec(gmm: GaussianMixture) -> dict:
    return {
        "weights": gmm.weights.tolist(),
        "means": gmm.means.tolist(),
        "variances": gmm.variances.tolist(),
    }


def edit_oracle_from_spec(spec: dict, path: str = "oracle") -> EditOracle:
    """Build an EditOracle from the shared JSON oracle description.

    Schema: {"unconditional": mixture, "image": {ref: mixture},
    "image_text": [{"source_ref", "text_ref", "mixture"}], "dim"?, "schedule"?}.
    The optional "schedule" entry is consumed by servers, not here.
    """
    if not isinstance(spec, dict):
        raise ValueError(f"{path}: expected an object")
    extra = set(spec) - {"dim", "schedule", "unconditional", "image", "image_text"}
    if extra:
        raise ValueError(f"{path}: unknown keys {sorted(extra)}")
    if "unconditional" not in spec:
        raise ValueError(f"{path}: missing key 'unconditional'")
    uncond = gmm_from_spec(spec["unconditional"], f"{path}.unconditional")
    image = {}
    for ref, mix_spec in (spec.get("image") or {}).items():
        image[ref] = gmm_from_spec(mix_spec, f"{path}.image[{ref!r}]")
    image_text = {}
    for i, entry in enumerate(spec.get("image_text") or []):
        where = f"{path}.image_text[{i}]"
        if not isinstance(entry, dict):
            raise ValueError(f"{where}: expected an object")
        extra = set(entry) - {"source_ref", "text_ref", "mixture"}
        if extra:
            raise ValueError(f"{where}: unknown keys {sorted(extra)}")
        try:
            key = (str(entry["source_ref"]), str(entry["text_ref"]))
            image_text[key] = gmm_from_spec(entry["mixture"], f"{where}.mixture")
        except KeyError as e:
            raise ValueError(f"{where}: missing key {e.args[0]!r}") from None
        if key[0] not in image:
            raise ValueError(f"{where}: source_ref {key[0]!r} has no image-branch mixture")
    oracle = EditOracle(unconditional=uncond, image=image, image_text=image_text)
    declared = spec.get("dim")
    if declared is not None and int(declared) != oracle.dim:
        raise ValueError(f"{path}.dim: declared {declared}, mixtures have dim {oracle.dim}")
    return oracle
