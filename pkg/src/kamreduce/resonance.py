"""Small divisors: Diophantine checks, Kronecker block spectra, frequency
screening against the excluded sets, and Monte Carlo measure estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .torus_fourier import mode_norms, mode_vectors


class ResonanceHit(ArithmeticError):
    """A divisor fell below its floor; carries the offending tuple."""

    def __init__(self, k, i, j, eigindex, value=None, floor=None, family="diff"):
        self.k, self.i, self.j, self.eigindex = k, i, j, eigindex
        self.value, self.floor, self.family = value, floor, family
        super().__init__(f"resonance at k={k}, blocks ({i},{j}), eigenvalue {eigindex}, "
                         f"family {family}: |divisor| = {value} < floor {floor}")

    def certificate(self):
        return {"k": list(self.k), "i": self.i, "j": self.j, "eigindex": self.eigindex,
                "divisor": self.value, "floor": self.floor, "family": self.family}


# ---------------------------------------------------------------------------
# Diophantine condition


@dataclass(frozen=True)
class DiophantineReport:
    passed: bool
    min_margin: float
    argmin_k: tuple
    K: int


def _nonzero_modes(dim, K):
    ks = mode_vectors(dim, K).reshape(-1, dim)
    l1 = mode_norms(dim, K).reshape(-1)
    keep = (l1 > 0) & (l1 <= K)
    return ks[keep], l1[keep]


def diophantine_margins(omega, gamma, tau, K):
    """Normalized margins |<k,w>| |k|^tau / gamma for all 0 < |k| <= K."""
    omega = np.atleast_1d(np.asarray(omega, float))
    ks, l1 = _nonzero_modes(len(omega), K)
    kw = np.abs(ks @ omega)
    with np.errstate(divide="ignore", invalid="ignore"):
        if gamma == 0:
            margin = np.where(kw == 0, 0.0, np.inf)
        else:
            margin = kw * l1.astype(float) ** tau / gamma
    return ks, margin


def diophantine_check(omega, gamma: float, tau: float | None = None, K: int = 32) -> DiophantineReport:
    """Check |<k,w>| >= gamma/|k|^tau for 0 < |k| <= K and report the worst mode."""
    if K < 1:
        raise ValueError("K must be at least 1")
    omega = np.atleast_1d(np.asarray(omega, float))
    if tau is None:
        tau = len(omega) + 1
    ks, margin = diophantine_margins(omega, gamma, tau, K)
    i = int(np.argmin(margin))
    m = float(margin[i])
    exact = bool(np.any(ks @ omega == 0))
    passed = (m >= 1.0) and not exact
    return DiophantineReport(passed, 0.0 if exact else m, tuple(int(x) for x in ks[i]), K)


# ---------------------------------------------------------------------------
# Kronecker spectra and divisor floors


def divisor_floor(k, i: int, j: int, gamma_m: float, n: int) -> float:
    """(|i-j|+1) gamma_m / A_k with A_k = |k|^(2n+4) + 8 and |k| the l1 norm."""
    kn = float(np.abs(np.atleast_1d(k)).sum())
    return (abs(i - j) + 1) * gamma_m / (kn ** (2 * n + 4) + 8.0)


def kron_operator(Li, Lj, family: str = "diff") -> np.ndarray:
    """I (x) Li -/+ Lj^T (x) I acting on column-stacked vec(F) for F of shape (dim Li, dim Lj)."""
    Li = np.atleast_2d(Li)
    Lj = np.atleast_2d(Lj)
    a = np.kron(np.eye(Lj.shape[0]), Li)
    b = np.kron(Lj.T, np.eye(Li.shape[0]))
    return a - b if family == "diff" else a + b


def block_eigs(Li, Lj, family: str = "diff") -> np.ndarray:
    """Sorted real eigenvalues of the Kronecker difference (or sum) of two blocks."""
    Li = np.atleast_2d(np.asarray(Li))
    Lj = np.atleast_2d(np.asarray(Lj))
    op = kron_operator(Li, Lj, family)
    herm = 0.5 * (op + op.conj().T)
    return np.linalg.eigvalsh(herm)


def _pair_eigs(blocks, family):
    J = len(blocks) - 1
    return {(i, j): block_eigs(blocks[i], blocks[j], family) for i in range(J + 1) for j in range(J + 1)}


def _blocks_of(nf):
    return nf.blocks if hasattr(nf, "blocks") else list(nf)


# ---------------------------------------------------------------------------
# frequency screening


@dataclass
class ScreenVerdict:
    passed: bool
    min_margin: float
    offending: list = field(default_factory=list)
    checked: int = 0
    pruned: int = 0
    prune_constant: float = 1.0

    def as_dict(self):
        return {
            "passed": self.passed,
            "min_margin": self.min_margin,
            "offending": [list(map(_jsonable, t)) for t in self.offending],
            "checked": self.checked,
            "pruned": self.pruned,
            "prune_constant": self.prune_constant,
        }


def _jsonable(x):
    if isinstance(x, (tuple, list, np.ndarray)):
        return [_jsonable(y) for y in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


def _prune_bounds(blocks):
    """Per-pair spectral lower bounds used by the pruning rule."""
    J = len(blocks) - 1
    eigs = [np.linalg.eigvalsh(np.atleast_2d(b)) for b in blocks]
    base = np.array([e.mean() for e in eigs])
    spread = np.array([np.max(np.abs(e - c)) for e, c in zip(eigs, base)])
    gap = np.abs(base[:, None] - base[None, :])
    lower = gap - spread[:, None] - spread[None, :]
    idx = np.arange(J + 1)
    dist = np.abs(idx[:, None] - idx[None, :])
    return gap, lower, dist


def screen_frequency(omega, nf, K_m: int, gamma_m: float, n: int | None = None,
                     J: int | None = None, families=("diff", "sum"), prune: bool = True,
                     exhaustive_check: bool = False,
                     max_report: int = 16) -> ScreenVerdict:
    """Check every divisor |-<k,w> + mu| against (|i-j|+1) gamma_m / A_k.

    The difference family (uu-bar equation) skips k=0, i=j; the sum family
    (uu and u-bar u-bar equations) is checked everywhere.  Pairs far from the
    diagonal are pruned once a spectral lower bound certifies them; the
    pruning constant is doubled until that certificate holds.
    """
    omega = np.atleast_1d(np.asarray(omega, float))
    blocks = _blocks_of(nf)
    n = len(omega) if n is None else n
    J = len(blocks) - 1 if J is None else J
    blocks = blocks[: J + 1]
    ks = mode_vectors(n, K_m).reshape(-1, n)
    l1 = mode_norms(n, K_m).reshape(-1)
    keep = l1 <= K_m
    ks, l1 = ks[keep], l1[keep]
    kw = ks @ omega
    A = l1.astype(float) ** (2 * n + 4) + 8.0
    gap, lower, dist = _prune_bounds(blocks)
    fams = {f: _pair_eigs(blocks, f) for f in families}

    min_margin = np.inf
    offending = []
    checked = 0
    pruned = 0
    cstar = 1.0
    for kk in range(len(ks)):
        t = abs(kw[kk])
        mask = np.zeros_like(dist, dtype=bool)
        if prune:
            while True:
                mask = dist > cstar * (t + 1.0)
                if not np.any(mask):
                    break
                floors = (dist + 1) * gamma_m / A[kk]
                need = np.maximum(0.25 * gap, floors)
                if np.all(lower[mask] - t >= need[mask]):
                    break
                cstar *= 2.0
        for fam in families:
            eigs = fams[fam]
            for (i, j), mu in eigs.items():
                if fam == "diff" and l1[kk] == 0 and i == j:
                    continue
                if fam == "diff" and mask[i, j]:
                    pruned += 1
                    if not exhaustive_check:
                        continue
                dv = np.abs(-kw[kk] + mu) if fam == "diff" else np.abs(kw[kk] + mu)
                fl = (abs(i - j) + 1) * gamma_m / A[kk]
                checked += len(mu)
                with np.errstate(divide="ignore"):
                    margins = dv / fl if fl > 0 else np.where(dv == 0, 0.0, np.inf)
                m = float(np.min(margins))
                if m < min_margin:
                    min_margin = m
                if m < 1.0 and len(offending) < max_report:
                    l = int(np.argmin(margins))
                    offending.append((tuple(int(x) for x in ks[kk]), int(i), int(j), int(l), fam, float(dv[l]), float(fl)))
    return ScreenVerdict(len(offending) == 0, float(min_margin), offending, checked, pruned, cstar)


# ---------------------------------------------------------------------------
# Monte Carlo measure of the excluded set


@dataclass(frozen=True)
class MeasureReport:
    gammas: tuple
    fractions: tuple
    slope: float
    ci: tuple
    samples: int
    seed: int


def _exclusion_table(blocks, families):
    """Flattened (mu, |i-j|, family sign, skip-at-k0) table for vectorized screening."""
    mus, dists, signs, diag = [], [], [], []
    for fam in families:
        for (i, j), mu in _pair_eigs(blocks, fam).items():
            for v in mu:
                mus.append(v)
                dists.append(abs(i - j))
                signs.append(-1.0 if fam == "diff" else 1.0)
                diag.append(fam == "diff" and i == j)
    return np.array(mus), np.array(dists), np.array(signs), np.array(diag)


def excluded_mask(omegas, blocks, K: int, gamma: float, families=("diff", "sum"),
                  chunk: int = 2048) -> np.ndarray:
    """Boolean array: True where the frequency fails the step screen."""
    omegas = np.atleast_2d(np.asarray(omegas, float))
    n = omegas.shape[1]
    mus, dists, signs, diag = _exclusion_table(blocks, families)
    ks = mode_vectors(n, K).reshape(-1, n)
    l1 = mode_norms(n, K).reshape(-1)
    sel = l1 <= K
    ks, l1 = ks[sel], l1[sel]
    out = np.zeros(len(omegas), bool)
    for start in range(0, len(omegas), chunk):
        w = omegas[start:start + chunk]
        bad = np.zeros(len(w), bool)
        for kk in range(len(ks)):
            A = float(l1[kk]) ** (2 * n + 4) + 8.0
            use = ~(diag & (l1[kk] == 0))
            kw = w @ ks[kk]
            dv = np.abs(signs[use][None, :] * kw[:, None] + mus[use][None, :])
            fl = (dists[use] + 1) * gamma / A
            bad |= np.any(dv < fl[None, :], axis=1)
        out[start:start + chunk] = bad
    return out


def _fit_slope(gammas, fracs):
    g = np.log(np.asarray(gammas, float))
    f = np.asarray(fracs, float)
    if np.any(f <= 0):
        return float("nan")
    return float(np.polyfit(g, np.log(f), 1)[0])


def measure_estimate(gammas, n: int, M: float, eps: float, J: int, K: int, samples: int,
                     seed: int, rho: float = 1.0, blocks=None, families=("diff", "sum"),
                     n_boot: int = 200) -> MeasureReport:
    """Excluded fraction of w ~ U[1,2]^n per gamma, with a log-log slope fit.

    The step-0 normal form rho*sqrt(lambda_j) is used unless explicit blocks
    are given; eps is carried for the report only.  The confidence interval is
    a seeded bootstrap over the frequency samples.
    """
    if samples < 1000:
        raise ValueError("measure estimate needs at least 1000 samples")
    rng = np.random.default_rng(seed)
    omegas = rng.uniform(1.0, 2.0, size=(samples, n))
    if blocks is None:
        lam = np.arange(J + 1) ** 2 + M
        blocks = [np.array([[rho * np.sqrt(lam[0])]])] + [rho * np.sqrt(lam[j]) * np.eye(2) for j in range(1, J + 1)]
    masks = [excluded_mask(omegas, blocks, K, g, families) if g > 0 else np.zeros(samples, bool)
             for g in gammas]
    fracs = [float(m.mean()) for m in masks]
    pos = [(g, m) for g, m in zip(gammas, masks) if g > 0]
    slope = _fit_slope([g for g, _ in pos], [m.mean() for _, m in pos]) if len(pos) >= 2 else float("nan")
    boots = []
    brng = np.random.default_rng(seed + 1)
    if len(pos) >= 2 and np.isfinite(slope):
        for _ in range(n_boot):
            idx = brng.integers(0, samples, samples)
            s = _fit_slope([g for g, _ in pos], [m[idx].mean() for _, m in pos])
            if np.isfinite(s):
                boots.append(s)
    ci = (float(np.percentile(boots, 2.5)), float(np.percentile(boots, 97.5))) if boots else (float("nan"), float("nan"))
    return MeasureReport(tuple(float(g) for g in gammas), tuple(fracs), slope, ci, samples, seed)


def resonant_frequency(i: int, j: int, k: int, M: float, rho: float = 1.0) -> float:
    """Frequency w (n=1) with k*w = rho (sqrt(lambda_i) - sqrt(lambda_j))."""
    return rho * (np.sqrt(i * i + M) - np.sqrt(j * j + M)) / k


@dataclass
class FrequencySample:
    """A frequency with its per-step verdicts and Diophantine margin."""

    omega: np.ndarray
    verdicts: list = field(default_factory=list)
    diophantine_margin: float = float("inf")

    def record(self, step: int, verdict: ScreenVerdict):
        self.verdicts.append((step, verdict))

    @property
    def passed(self) -> bool:
        return all(v.passed for _, v in self.verdicts)

    def first_failure(self):
        for step, v in self.verdicts:
            if not v.passed:
                return step, v
        return None
