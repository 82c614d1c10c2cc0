"""Pairwise human-evaluation statistics.

Votes are ``+1`` (model A preferred), ``0`` (tie) or ``-1`` (model B
preferred).  Item consensus is the mean vote; the net win rate is 100 times
the mean consensus.  Elo ratings come from a Bradley-Terry maximum-likelihood
fit; :func:`bt_fit` extends the same likelihood with binned covariates.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng

OUTCOMES = {"win_a": 1.0, "tie": 0.5, "win_b": 0.0}


@dataclass(frozen=True)
class ItemVotes:
    item_id: str
    votes: tuple[int, ...]
    model_a: str = "A"
    model_b: str = "B"

    def __post_init__(self):
        if not self.votes:
            raise ValueError(f"item {self.item_id!r} has no votes")
        if any(v not in (-1, 0, 1) for v in self.votes):
            raise ValueError(f"item {self.item_id!r} has votes outside {{-1, 0, +1}}")

    def swapped(self) -> ItemVotes:
        return ItemVotes(self.item_id, tuple(-v for v in self.votes), self.model_b, self.model_a)


@dataclass(frozen=True)
class BattleRecord:
    model_a: str
    model_b: str
    outcome: str
    weight: float = 1.0

    def __post_init__(self):
        if self.model_a == self.model_b:
            raise ValueError("a battle needs two different models")
        if self.outcome not in OUTCOMES:
            raise ValueError(f"outcome must be one of {sorted(OUTCOMES)}, got {self.outcome!r}")
        if not self.weight > 0:
            raise ValueError("battle weight must be positive")

    @property
    def score_a(self) -> float:
        return OUTCOMES[self.outcome]


def consensus(votes) -> float:
    if isinstance(votes, ItemVotes):
        votes = votes.votes
    votes = list(votes)
    if not votes:
        raise ValueError("no votes")
    return math.fsum(votes) / len(votes)


def majority_vote(votes: Sequence[int]) -> int:
    """Majority label of a handful of votes; no strict majority gives 0."""
    if not votes:
        raise ValueError("no votes")
    counts = {v: list(votes).count(v) for v in (-1, 0, 1)}
    for label, c in counts.items():
        if c * 2 > len(votes):
            return label
    return 0


def likert_to_fraction(score: int) -> float:
    """Map a 1-5 rating to 0.2, 0.4, ..., 1.0."""
    if score not in (1, 2, 3, 4, 5):
        raise ValueError("Likert score must be an integer 1-5")
    return score / 5.0


def f1_from_likert(precision: int, recall: int) -> float:
    p, r = likert_to_fraction(precision), likert_to_fraction(recall)
    return 2 * p * r / (p + r)


def net_win_rate(scores: Iterable[float]) -> float:
    """Net win rate in percent: ``100 * mean(consensus scores)``."""
    scores = list(scores)
    if not scores:
        raise ValueError("no items")
    return 100.0 * math.fsum(scores) / len(scores)


def bootstrap_ci(scores: Sequence[float], resamples: int = 1000, rng: Rng | None = None,
                 level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval of the net win rate.

    Items are resampled with replacement ``resamples`` times; the interval
    ends are the ``(1 - level) / 2`` and ``(1 + level) / 2`` quantiles of the
    resampled net win rates, linearly interpolated between order statistics.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 2:
        raise ValueError("bootstrap needs at least 2 items")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    if np.all(s == s[0]):
        # every resample is the same multiset; skip the summation rounding
        point = net_win_rate(s)
        return point, point
    rng = rng or Rng(0)
    idx = rng.integers(s.size, (resamples, s.size))
    stats = 100.0 * s[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha], method="linear")
    return float(lo), float(hi)


def significance_band(nwt: float, sigma: float) -> str:
    """``significant`` beyond 2 sigma, ``moderate`` within 1-2 sigma, else ``on_par``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    a = abs(nwt)
    if a > 2 * sigma:
        return "significant"
    if a > sigma:
        return "moderate"
    return "on_par"


def _connected_components(models: list[str], edges: Iterable[tuple[str, str]]) -> list[list[str]]:
    parent = {m: m for m in models}

    def find(m):
        while parent[m] != m:
            parent[m] = parent[parent[m]]
            m = parent[m]
        return m

    for a, b in edges:
        parent[find(a)] = find(b)
    groups: dict[str, list[str]] = {}
    for m in models:
        groups.setdefault(find(m), []).append(m)
    return sorted(groups.values(), key=lambda g: g[0])


def _win_matrix(battles: Sequence[BattleRecord], models: Sequence[str] | None):
    names = sorted({m for b in battles for m in (b.model_a, b.model_b)} | set(models or ()))
    index = {m: i for i, m in enumerate(names)}
    wins = np.zeros((len(names), len(names)))
    for b in battles:
        i, j = index[b.model_a], index[b.model_b]
        wins[i, j] += b.weight * b.score_a
        wins[j, i] += b.weight * (1.0 - b.score_a)
    return names, wins


def bt_strengths(wins: np.ndarray, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Bradley-Terry maximum-likelihood log-strengths by minorization-maximization.

    ``wins[i, j]`` is the (possibly fractional) number of times ``i`` beat
    ``j``.  Returns natural-log strengths centred to mean zero.
    """
    n = wins.shape[0]
    games = wins + wins.T
    total_wins = wins.sum(axis=1)
    p = np.ones(n)
    for _ in range(max_iter):
        denom = (games / (p[:, None] + p[None, :])).sum(axis=1)
        new = total_wins / denom
        new /= np.exp(np.mean(np.log(new)))
        done = np.max(np.abs(np.log(new) - np.log(p))) < tol
        p = new
        if done:
            break
    else:
        raise RuntimeError("Bradley-Terry iteration did not converge")
    return np.log(p)


def _check_mle_exists(names, wins):
    """Every model must reach every other through win edges, else some strength runs off to infinity."""
    n = len(names)
    reach = (wins > 0).astype(np.int64)
    np.fill_diagonal(reach, 1)
    for _ in range(max(1, math.ceil(math.log2(max(n, 2))))):
        reach = ((reach @ reach) > 0).astype(np.int64)
    if not np.all(reach):
        raise ValueError("maximum-likelihood ratings do not exist: some model never wins or never "
                         "loses against the rest; use prior > 0")


def elo_fit(battles: Sequence[BattleRecord], models: Sequence[str] | None = None,
            prior: float = 1.0, method: str = "mle", k_factor: float = 4.0,
            scale: float = 400.0, mean_rating: float = 1000.0) -> dict[str, float]:
    """Elo ratings ``scale * log10(strength)`` shifted so the ratings average ``mean_rating``.

    ``method="mle"`` fits Bradley-Terry strengths by maximum likelihood, with
    ties counted as half a win for each side.  ``prior`` adds that many
    virtual tied games to every pair that actually met, which keeps
    ratings finite when a model wins every game; ``prior=0`` gives the plain
    MLE and raises if it does not exist.  ``method="sequential"`` runs the
    classic online update with ``k_factor`` in the given battle order.
    """
    names, wins = _win_matrix(battles, models)
    if not names:
        raise ValueError("no battles")
    games = wins + wins.T
    idle = [m for m, g in zip(names, games.sum(axis=1)) if g == 0]
    if idle:
        raise ValueError(f"models with zero comparisons: {idle}")
    comps = _connected_components(names, ((b.model_a, b.model_b) for b in battles))
    if len(comps) > 1:
        raise ValueError(f"battle graph is disconnected: components {comps}")

    if method == "sequential":
        ratings = dict.fromkeys(names, mean_rating)
        for b in battles:
            ra, rb = ratings[b.model_a], ratings[b.model_b]
            expected = 1.0 / (1.0 + 10 ** ((rb - ra) / scale))
            delta = k_factor * b.weight * (b.score_a - expected)
            ratings[b.model_a] = ra + delta
            ratings[b.model_b] = rb - delta
        return ratings
    if method != "mle":
        raise ValueError(f"unknown method {method!r}")

    if prior < 0:
        raise ValueError("prior must be >= 0")
    if prior > 0:
        wins = wins + 0.5 * prior * (games > 0)
    else:
        _check_mle_exists(names, wins)
    log_p = bt_strengths(wins)
    r = scale * log_p / math.log(10.0)
    r = r - r.mean() + mean_rating
    return dict(zip(names, (float(v) for v in r)))


def elo_win_probability(r_a: float, r_b: float, scale: float = 400.0) -> float:
    return 1.0 / (1.0 + 10 ** ((r_b - r_a) / scale))


@dataclass(frozen=True)
class BTItem:
    """One compared pair with its votes and covariates.

    ``bin_a`` / ``bin_b`` are the covariate bin indices of each side's
    generation and ``group`` is the item's group (e.g. music present or not).
    """

    model_a: str
    model_b: str
    votes: tuple[int, ...]
    group: int = 0
    bin_a: int = 0
    bin_b: int = 0


@dataclass
class BTModel:
    """Fitted Bradley-Terry regression.

    ``offsets[m]`` is the per-model offset (first model in sorted order is
    pinned to 0) and ``coef[r, g]`` the coefficient of bin ``r`` in group
    ``g`` (bin 0 of every group pinned to 0).  The latent quality of model
    ``m`` on an item of group ``g`` whose covariate falls in bin ``r`` is
    ``offsets[m] + coef[r, g]``; latent differences are log-odds.
    """

    models: list[str]
    offsets: dict[str, float]
    coef: np.ndarray
    log_likelihood: float
    iterations: int
    grad_norm: float
    ll_trace: list[float] = field(default_factory=list)

    def latent(self, model: str, group: int = 0, bin_index: int = 0) -> float:
        return self.offsets[model] + float(self.coef[bin_index, group])

    def win_probability(self, item: BTItem) -> float:
        d = (self.latent(item.model_a, item.group, item.bin_a)
             - self.latent(item.model_b, item.group, item.bin_b))
        return 1.0 / (1.0 + math.exp(-d))


class ConvergenceError(RuntimeError):
    def __init__(self, iterations: int, grad_norm: float):
        super().__init__(f"no convergence after {iterations} iterations; gradient norm {grad_norm:.3e}")
        self.iterations = iterations
        self.grad_norm = grad_norm


def _bt_design(items: Sequence[BTItem], n_bins: int | None, n_groups: int | None):
    models = sorted({m for it in items for m in (it.model_a, it.model_b)})
    mi = {m: i for i, m in enumerate(models)}
    n_bins = n_bins or 1 + max(max(it.bin_a, it.bin_b) for it in items)
    n_groups = n_groups or 1 + max(it.group for it in items)
    # free parameters: offsets of models[1:], then coef[r, g] for r >= 1
    n_off = len(models) - 1
    n_par = n_off + (n_bins - 1) * n_groups
    rows, a_wins = [], []
    for it in items:
        if it.model_a == it.model_b:
            raise ValueError("an item must compare two different models")
        if not (0 <= it.group < n_groups and 0 <= it.bin_a < n_bins and 0 <= it.bin_b < n_bins):
            raise ValueError("bin or group index out of range")
        x = np.zeros(n_par)
        for model, sign in ((it.model_a, 1.0), (it.model_b, -1.0)):
            if mi[model] > 0:
                x[mi[model] - 1] += sign
        for b, sign in ((it.bin_a, 1.0), (it.bin_b, -1.0)):
            if b > 0:
                x[n_off + (b - 1) * n_groups + it.group] += sign
        for v in it.votes:
            if v not in (-1, 0, 1):
                raise ValueError("votes must be -1, 0 or +1")
            rows.append(x)
            a_wins.append((v + 1) / 2.0)
    return models, n_bins, n_groups, n_off, np.array(rows).reshape(-1, n_par), np.array(a_wins)


def _bt_loglik(X, y, beta):
    d = X @ beta
    # log sigmoid(d) * y + log sigmoid(-d) * (1 - y), stably
    return float(np.sum(-y * np.logaddexp(0.0, -d) - (1.0 - y) * np.logaddexp(0.0, d)))


def bt_fit(items: Sequence[BTItem], n_bins: int | None = None, n_groups: int | None = None,
           tol: float = 1e-8, max_iter: int = 200) -> BTModel:
    """Maximum-likelihood Bradley-Terry regression with binned covariates.

    Ties count as half a win for each side.  Optimisation is Newton ascent
    with backtracking, so the log-likelihood never decreases; it stops once
    the gradient norm is at most ``tol``.
    """
    if not items:
        raise ValueError("no items")
    models, n_bins, n_groups, n_off, X, y = _bt_design(items, n_bins, n_groups)
    n_par = X.shape[1]
    if n_par and np.linalg.matrix_rank(X) < n_par:
        raise ValueError("design matrix is rank deficient after anchoring; "
                         "some offsets or bin coefficients are not identifiable")
    beta = np.zeros(n_par)
    ll = _bt_loglik(X, y, beta)
    trace = [ll]
    it = 0
    while True:
        p = 1.0 / (1.0 + np.exp(-(X @ beta)))
        grad = X.T @ (y - p)
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= tol:
            break
        if it >= max_iter:
            raise ConvergenceError(it, grad_norm)
        it += 1
        hess = (X * (p * (1.0 - p))[:, None]).T @ X
        try:
            direction = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            direction = grad
        step = 1.0
        while True:
            cand = beta + step * direction
            cand_ll = _bt_loglik(X, y, cand)
            if cand_ll >= ll:
                break
            step /= 2
            if step < 1e-12:
                raise ConvergenceError(it, grad_norm)
        beta, ll = cand, cand_ll
        trace.append(ll)
    offsets = {models[0]: 0.0}
    offsets.update({m: float(beta[i]) for i, m in enumerate(models[1:])})
    coef = np.zeros((n_bins, n_groups))
    coef[1:, :] = beta[n_off:].reshape(n_bins - 1, n_groups)
    return BTModel(models, offsets, coef, ll, it, grad_norm, trace)


def read_jsonl(path) -> list[dict]:
    """Parse a UTF-8 JSONL file, skipping blank lines."""
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ValueError(f"line {lineno}: expected a JSON object")
            records.append(obj)
    return records


def parse_votes(records: Iterable[dict]) -> list[ItemVotes]:
    out = []
    for n, r in enumerate(records, 1):
        try:
            out.append(ItemVotes(str(r["item_id"]), tuple(int(v) for v in r["votes"]),
                                 str(r["model_a"]), str(r["model_b"])))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"record {n}: missing or malformed field {exc}") from None
    return out


def parse_battles(records: Iterable[dict]) -> list[BattleRecord]:
    out = []
    for n, r in enumerate(records, 1):
        try:
            out.append(BattleRecord(str(r["model_a"]), str(r["model_b"]), r["outcome"],
                                    float(r.get("weight", 1.0))))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"record {n}: missing or malformed field {exc}") from None
    return out


def parse_bt_items(records: Iterable[dict]) -> list[BTItem]:
    """Vote records with optional ``group``, ``bin_a`` and ``bin_b`` integer keys (default 0)."""
    out = []
    for n, r in enumerate(records, 1):
        try:
            out.append(BTItem(str(r["model_a"]), str(r["model_b"]),
                              tuple(int(v) for v in r["votes"]),
                              int(r.get("group", 0)), int(r.get("bin_a", 0)), int(r.get("bin_b", 0))))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"record {n}: missing or malformed field {exc}") from None
    return out
