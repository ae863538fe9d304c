"""
Multi-order pairwise interactions of black-box games.

A game assigns a score v(S) to every subset S of n players. For two players
i != j and an order m the interaction is

    I^(m)(i, j) = E_{S subset of N minus {i, j}, |S| = m} [ delta_v(i, j, S) ]
    delta_v(i, j, S) = v(S + {i, j}) - v(S + {i}) - v(S + {j}) + v(S)

For images the players are the cells of a rectangular grid and v(S) is the
true-class log-odds of the model when every cell outside S is replaced by the
baseline colour. Subsets are encoded as integer bitmasks throughout.
"""

import itertools
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from autodiff import no_grad
from errors import DegenerateProfileError, EnumerationLimitError, ShapeError
from numeric_helpers import derive_seed, rng_for, sha256_hex, stable_logsumexp
from pydantic_models import InteractionProfile, ProxyParams
from tiny_cnn import TinyCnn, forward

logger = logging.getLogger(__name__)

BRUTEFORCE_MAX_PLAYERS = 14
DECOMPOSITION_MAX_PLAYERS = 10

Subset = Union[int, Iterable[int]]


def to_mask(players: Subset) -> int:
    if isinstance(players, (int, np.integer)):
        return int(players)
    mask = 0
    for p in players:
        mask |= 1 << int(p)
    return mask


def members(mask: int, n: int) -> List[int]:
    return [p for p in range(n) if mask >> p & 1]


# Player grid


@dataclass(frozen=True)
class PlayerGrid:
    """Equal tiling of a square image into rows x cols regions; player k is cell (k // cols, k % cols)."""

    rows: int
    cols: int
    baseline: Tuple[float, float, float]
    image_size: int = 32

    def __post_init__(self):
        if self.image_size % self.rows or self.image_size % self.cols:
            raise ShapeError(f"A {self.rows}x{self.cols} grid does not tile a {self.image_size}px image")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def region(self, player: int) -> Tuple[slice, slice]:
        cell_h = self.image_size // self.rows
        cell_w = self.image_size // self.cols
        r, c = divmod(player, self.cols)
        return slice(r * cell_h, (r + 1) * cell_h), slice(c * cell_w, (c + 1) * cell_w)

    def pixel_masks(self, subsets: Sequence[int]) -> np.ndarray:
        """Boolean (len(subsets), H, W) arrays, True where the pixel belongs to a player in S."""
        bits = (np.asarray(subsets, dtype=np.int64)[:, None] >> np.arange(self.n)) & 1
        cells = bits.reshape(-1, self.rows, self.cols).astype(bool)
        cell_h = self.image_size // self.rows
        cell_w = self.image_size // self.cols
        return np.repeat(np.repeat(cells, cell_h, axis=1), cell_w, axis=2)

    def compose(self, image: np.ndarray, subsets: Sequence[int]) -> np.ndarray:
        """x_S for each subset: pixels of S copied from `image`, everything else set to the baseline."""
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (3, self.image_size, self.image_size):
            raise ShapeError(f"Expected a (3, {self.image_size}, {self.image_size}) image, got {image.shape}")
        keep = self.pixel_masks(subsets)[:, None, :, :]
        baseline = np.asarray(self.baseline, dtype=np.float64).reshape(1, 3, 1, 1)
        return np.where(keep, image[None], baseline)


# Games


class GameFunction(ABC):
    """A deterministic set function over players 0..n-1 with memoized values."""

    def __init__(self, n: int):
        if n < 2:
            raise ValueError("A game needs at least 2 players")
        self.n = n
        self._cache: Dict[int, float] = {}

    @property
    def full_mask(self) -> int:
        return (1 << self.n) - 1

    @abstractmethod
    def _evaluate(self, subsets: List[int]) -> np.ndarray:
        """Scores for subsets not yet cached, in the given order."""

    def values(self, subsets: Sequence[int]) -> np.ndarray:
        missing = sorted({s for s in subsets if s not in self._cache})
        if missing:
            for s, v in zip(missing, self._evaluate(missing)):
                self._cache[s] = float(v)
        return np.array([self._cache[s] for s in subsets], dtype=np.float64)

    def value(self, subset: Subset) -> float:
        return float(self.values([to_mask(subset)])[0])

    @property
    def evaluations(self) -> int:
        return len(self._cache)


class TabulatedGame(GameFunction):
    def __init__(self, table: np.ndarray):
        table = np.asarray(table, dtype=np.float64)
        n = int(round(math.log2(table.size)))
        if 2**n != table.size:
            raise ValueError(f"A game table needs 2^n entries, got {table.size}")
        super().__init__(n)
        self.table = table

    @classmethod
    def random(cls, n: int, seed: int) -> "TabulatedGame":
        return cls(rng_for(seed, 83, n).normal(size=2**n))

    def _evaluate(self, subsets):
        return self.table[np.asarray(subsets, dtype=np.int64)]


class AdditiveGame(GameFunction):
    """v(S) = sum of the weights of the players in S."""

    def __init__(self, weights: Sequence[float]):
        super().__init__(len(weights))
        self.weights = np.asarray(weights, dtype=np.float64)

    def _evaluate(self, subsets):
        return np.array([self.weights[members(s, self.n)].sum() for s in subsets])


class PairwiseGame(GameFunction):
    """v(S) = c times the number of listed pairs contained in S (all pairs by default)."""

    def __init__(self, n: int, c: float, pairs: Optional[Sequence[Tuple[int, int]]] = None):
        super().__init__(n)
        self.c = float(c)
        self.pairs = [tuple(p) for p in pairs] if pairs is not None else list(itertools.combinations(range(n), 2))

    def _evaluate(self, subsets):
        return np.array(
            [self.c * sum(1 for i, j in self.pairs if s >> i & 1 and s >> j & 1) for s in subsets]
        )


class ScaledGame(GameFunction):
    """factor * v(S) for another game."""

    def __init__(self, game: GameFunction, factor: float):
        super().__init__(game.n)
        self.game = game
        self.factor = float(factor)

    def _evaluate(self, subsets):
        return self.factor * self.game.values(subsets)


class ModelGame(GameFunction):
    """
    v(S) = z_y(x_S) - log sum_{k != y} exp(z_k(x_S)), the true-class log-odds
    of the model on the image with players outside S set to the baseline.
    """

    def __init__(self, model: TinyCnn, image: np.ndarray, label: int, grid: PlayerGrid, batch_size: int = 256):
        super().__init__(grid.n)
        if not 0 <= label < model.num_classes:
            raise ShapeError(f"Label {label} out of range for {model.num_classes} classes")
        self.model = model
        self.image = np.asarray(image, dtype=np.float64)
        self.label = int(label)
        self.grid = grid
        self.batch_size = batch_size

    def _evaluate(self, subsets):
        scores = []
        with no_grad():
            for start in range(0, len(subsets), self.batch_size):
                chunk = subsets[start : start + self.batch_size]
                logits = forward(self.model, self.grid.compose(self.image, chunk)).data
                others = logits.copy()
                others[:, self.label] = -np.inf
                scores.append(logits[:, self.label] - stable_logsumexp(others, axis=1))
        return np.concatenate(scores)


def model_game(model: TinyCnn, image: np.ndarray, label: int, grid: PlayerGrid, batch_size: int = 256) -> ModelGame:
    return ModelGame(model, image, label, grid, batch_size=batch_size)


# Interactions


def _check_pair(game: GameFunction, i: int, j: int) -> None:
    if i == j:
        raise ValueError("An interaction needs two distinct players")
    for p in (i, j):
        if not 0 <= p < game.n:
            raise ValueError(f"Player {p} outside 0..{game.n - 1}")


def _check_order(game: GameFunction, m: int) -> None:
    if not 0 <= m <= game.n - 2:
        raise ValueError(f"Order {m} outside [0, {game.n - 2}]")


def _delta_subsets(i: int, j: int, context: int) -> Tuple[int, int, int, int]:
    bi, bj = 1 << i, 1 << j
    return context | bi | bj, context | bi, context | bj, context


def delta_v(game: GameFunction, i: int, j: int, context: Subset) -> float:
    """v(S + {i, j}) - v(S + {i}) - v(S + {j}) + v(S)."""
    _check_pair(game, i, j)
    context = to_mask(context)
    if context >> i & 1 or context >> j & 1:
        raise ValueError(f"Context must not contain players {i} or {j}")
    both, with_i, with_j, neither = game.values(_delta_subsets(i, j, context))
    return float(both - with_i - with_j + neither)


@dataclass
class InteractionEstimate:
    order: int
    value: float  # mean over pairs of |I^(m)(i, j)|
    signed: float  # mean over pairs of I^(m)(i, j)
    stderr: float
    samples: int  # contexts per pair
    pairs: int
    exhaustive: bool = False
    per_pair: Dict[Tuple[int, int], float] = field(default_factory=dict)


def interaction_mc(
    game: GameFunction, m: int, num_contexts: int, num_pairs: int, seed: int
) -> InteractionEstimate:
    """
    Estimate order-m interactions by sampling pairs and size-m contexts.

    When num_pairs covers every pair, all pairs are used; otherwise distinct
    pairs are drawn uniformly. When num_contexts is at least C(n - 2, m)
    every context is enumerated once and the standard error is 0; otherwise
    contexts are drawn uniformly with replacement. All needed subsets are
    evaluated in one batch and reduced in a fixed order.
    """
    _check_order(game, m)
    if num_contexts < 1 or num_pairs < 1:
        raise ValueError("num_contexts and num_pairs must be >= 1")
    rng = rng_for(seed, 89, m)
    n = game.n

    all_pairs = list(itertools.combinations(range(n), 2))
    if num_pairs >= len(all_pairs):
        pairs = all_pairs
    else:
        chosen = np.sort(rng.choice(len(all_pairs), size=num_pairs, replace=False))
        pairs = [all_pairs[k] for k in chosen]

    total_contexts = math.comb(n - 2, m)
    exhaustive = num_contexts >= total_contexts
    contexts_per_pair: List[List[int]] = []
    for i, j in pairs:
        others = [p for p in range(n) if p != i and p != j]
        if exhaustive:
            contexts = [to_mask(c) for c in itertools.combinations(others, m)]
        else:
            contexts = [to_mask(rng.choice(others, size=m, replace=False)) for _ in range(num_contexts)]
        contexts_per_pair.append(contexts)

    requests = [
        s for (i, j), contexts in zip(pairs, contexts_per_pair) for c in contexts for s in _delta_subsets(i, j, c)
    ]
    scores = game.values(requests).reshape(-1, 4)
    deltas = scores[:, 0] - scores[:, 1] - scores[:, 2] + scores[:, 3]

    k = len(contexts_per_pair[0])
    per_pair_deltas = deltas.reshape(len(pairs), k)
    pair_means = per_pair_deltas.mean(axis=1)
    if exhaustive or k < 2:
        stderr = 0.0
    else:
        variances = per_pair_deltas.var(axis=1, ddof=1)
        stderr = float(math.sqrt(variances.sum() / k) / len(pairs))

    return InteractionEstimate(
        order=m,
        value=float(np.abs(pair_means).mean()),
        signed=float(pair_means.mean()),
        stderr=stderr,
        samples=k,
        pairs=len(pairs),
        exhaustive=exhaustive,
        per_pair={pair: float(v) for pair, v in zip(pairs, pair_means)},
    )


def interaction_bruteforce(game: GameFunction, m: int, i: int, j: int) -> float:
    """Exact I^(m)(i, j) by enumerating all C(n - 2, m) contexts."""
    if game.n > BRUTEFORCE_MAX_PLAYERS:
        raise EnumerationLimitError(
            f"Exact enumeration is limited to {BRUTEFORCE_MAX_PLAYERS} players (got {game.n}); "
            "use interaction_mc for larger games"
        )
    _check_pair(game, i, j)
    _check_order(game, m)
    others = [p for p in range(game.n) if p not in (i, j)]
    total = 0.0
    count = 0
    for context in itertools.combinations(others, m):
        total += delta_v(game, i, j, context)
        count += 1
    return total / count


def order_weight(n: int, m: int) -> float:
    """Weight of I^(m)(i, j) for one ordered pair when reconstructing v(N)."""
    return (n - 1 - m) / (n * (n - 1))


def decomposition_check(game: GameFunction) -> float:
    """
    |v(N) - RHS| with RHS = v(empty) + sum_i mu_i + sum over ordered pairs and
    orders of order_weight(n, m) * I^(m)(i, j), where mu_i = v({i}) - v(empty).
    Returns the absolute residual; it vanishes for every game.
    """
    n = game.n
    if n > DECOMPOSITION_MAX_PLAYERS:
        raise EnumerationLimitError(
            f"The decomposition check needs exact interactions and is limited to {DECOMPOSITION_MAX_PLAYERS} players"
        )
    empty = game.value(0)
    mu = sum(game.value(1 << i) - empty for i in range(n))
    pair_terms = 0.0
    for i, j in itertools.combinations(range(n), 2):
        for m in range(n - 1):
            # I^(m) is symmetric in (i, j): count both orderings
            pair_terms += 2.0 * order_weight(n, m) * interaction_bruteforce(game, m, i, j)
    return abs(game.value(game.full_mask) - (empty + mu + pair_terms))


# Profiles


def order_grid(n: int, fractions: Sequence[float]) -> List[int]:
    """Orders round(f * n) clipped to [0, n - 2], deduplicated and sorted."""
    if n < 2:
        raise ValueError("Order grids need n >= 2")
    orders = np.clip(np.rint(np.asarray(fractions, dtype=np.float64) * n), 0, n - 2).astype(int)
    return sorted(set(int(o) for o in orders))


def contexts_per_order(budget: int, num_orders: int, num_pairs: int) -> int:
    contexts = budget // (num_orders * num_pairs)
    if contexts < 1:
        raise ValueError(
            f"A budget of {budget} delta-v samples cannot give one context per order "
            f"({num_orders} orders x {num_pairs} pairs)"
        )
    return contexts


def profile_games(
    games: Sequence[GameFunction],
    orders: Sequence[int],
    budget: int,
    num_pairs: int,
    seed: int,
    show_progress: bool = False,
) -> InteractionProfile:
    """
    J^(m) = A(m) / mean over evaluated orders of A, where A(m) is the mean of
    |I^(m)| over games (images) and sampled pairs.
    """
    if not games:
        raise ValueError("profile needs at least one game")
    n = games[0].n
    orders = sorted(set(int(m) for m in orders))
    if any(not 0 <= m <= n - 2 for m in orders):
        raise ValueError(f"Every order must lie in [0, {n - 2}]")
    contexts = contexts_per_order(budget, len(orders), num_pairs)

    strengths = np.zeros((len(games), len(orders)))
    errors = np.zeros((len(games), len(orders)))
    for g, game in enumerate(tqdm(games, desc="interactions", unit="image", disable=not show_progress)):
        for o, m in enumerate(orders):
            estimate = interaction_mc(game, m, contexts, num_pairs, derive_seed(seed, g, m))
            strengths[g, o] = estimate.value
            errors[g, o] = estimate.stderr
        logger.debug(f"image {g}: {game.evaluations} distinct subsets evaluated")

    mean_strength = strengths.mean(axis=0)
    stderr = np.sqrt((errors**2).sum(axis=0)) / len(games)
    normalization = float(mean_strength.mean())
    if not normalization > 0:
        raise DegenerateProfileError("Every interaction estimate is zero; the profile cannot be normalized")
    return InteractionProfile(
        n=n,
        orders=orders,
        J=[float(v) for v in mean_strength / normalization],
        stderr=[float(v) for v in stderr / normalization],
        normalization=normalization,
        num_images=len(games),
    )


def profile(
    model: TinyCnn,
    images: np.ndarray,
    labels: np.ndarray,
    grid: PlayerGrid,
    orders: Sequence[int],
    budget: int,
    num_pairs: int,
    seed: int,
    batch_size: int = 256,
    show_progress: bool = False,
) -> InteractionProfile:
    """Interaction profile of a model averaged over a sample of images."""
    if len(images) == 0:
        raise ValueError("profile needs a nonempty image sample")
    games = [model_game(model, image, int(label), grid, batch_size) for image, label in zip(images, labels)]
    return profile_games(games, orders, budget, num_pairs, seed, show_progress=show_progress)


def profile_hash(p: InteractionProfile) -> str:
    return sha256_hex(p.model_dump(mode="json"))[:16]


# Proxy


def _floor_index(fraction: float, n: int) -> int:
    # tolerance keeps e.g. 0.29 * 100 on the intended side of the floor
    return int(math.floor(fraction * n + 1e-9))


def _nearest_order_value(orders: Sequence[int], values: Sequence[float], m: int) -> float:
    distances = [abs(o - m) for o in orders]
    best = min(range(len(orders)), key=lambda k: (distances[k], orders[k]))
    return values[best]


def proxy_m(p: InteractionProfile, params: Optional[ProxyParams] = None) -> float:
    """
    M(a, b, c) = sqrt( (1 / (max J - min J)) * sum_{m=floor(bn)}^{floor(cn)} J / sum_{m=0}^{floor(an)} J ).

    Sums run over integer orders, inclusive at both ends, with J at an
    integer order taken from the nearest evaluated order (ties go to the
    lower one). floor(cn) is clipped to n - 2.
    """
    params = params or ProxyParams()
    n = p.n
    orders, values = list(p.orders), list(p.J)
    if not orders:
        raise DegenerateProfileError("Profile has no evaluated orders")
    spread = max(values) - min(values)
    if spread <= 0:
        raise DegenerateProfileError("max J equals min J; M is undefined for a flat profile")

    top = min(_floor_index(params.c, n), n - 2)

    def band(lo: int, hi: int) -> float:
        return sum(_nearest_order_value(orders, values, m) for m in range(lo, hi + 1))

    numerator = band(_floor_index(params.b, n), top)
    denominator = band(0, min(_floor_index(params.a, n), top))
    if denominator == 0:
        raise DegenerateProfileError("Low-order band of J sums to zero")
    ratio = numerator / (spread * denominator)
    if ratio < 0:
        raise DegenerateProfileError("Proxy ratio is negative")
    return math.sqrt(ratio)
