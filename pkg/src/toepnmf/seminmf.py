"""Factorize an HRIR collection into one resonance filter and many reflections.

The collection is a matrix ``X`` of shape ``(num_taps, num_directions)``
whose columns are impulse responses.  The factorization approximates

    X  ~=  F @ G.T

where ``F`` is a constrained Toeplitz matrix shared by every direction (its
band is the causal *resonance filter*) and each row of the non-negative
``G`` is one direction's *reflection filter*.  Column ``i`` of the
reconstruction is then just the convolution of the resonance taps with
reflection ``i``.

Fitting alternates two steps that are each optimal or monotone in their own
subproblem:

* the resonance taps solve a small symmetric Toeplitz normal system in the
  band values (exact linear least squares restricted to the band), and
* ``G`` takes one multiplicative semi-NMF step, which keeps it non-negative
  and never increases the residual for the fixed resonance matrix.

Both steps are monotone, so the logged residual history is non-increasing.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .errors import DataError, NumericalError
from .hrir_io import HrirBundle, as_direction_pair
from .toeplitz import params_from_resonance_taps

MODEL_FORMAT_VERSION = 1

#: Additive guard in the multiplicative update denominator.
DEFAULT_UPDATE_EPS = 1e-12

#: Relative ridge applied when the resonance normal system is singular.
DEFAULT_RIDGE_SCALE = 1e-10

#: Monotonicity slack allowed in a residual log.
_MONOTONE_SLACK = 1e-9


@dataclass
class FactorizedModel:
    """A fitted resonance filter plus per-direction reflection filters.

    ``reflections`` is either a dense ``(num_directions, reflection_length)``
    non-negative array straight out of :func:`factorize`, or a list of
    :class:`~toepnmf.sparsify.SparseFilter` after sparsification (in which
    case ``sparsify_info`` records how the sparse filters were obtained).
    """

    resonance_taps: np.ndarray
    reflections: object
    sample_rate_hz: float = 0.0
    directions: list = field(default_factory=list)
    seed: int = 0
    rmse_history: list = field(default_factory=list)
    sparsify_info: dict | None = None

    def __post_init__(self):
        self.resonance_taps = np.asarray(self.resonance_taps, dtype=np.float64)
        if self.resonance_taps.ndim != 1 or self.resonance_taps.size == 0:
            raise DataError("resonance taps must be a non-empty 1-d array")
        if not self.is_sparse:
            self.reflections = np.asarray(self.reflections, dtype=np.float64)
            if self.reflections.ndim != 2:
                raise DataError("dense reflections must be a 2-d array")
            if np.any(self.reflections < 0.0):
                raise DataError("reflection filters must be non-negative")
        if self.directions and len(self.directions) != self.num_directions:
            raise DataError(
                "have %d direction entries for %d reflection filters"
                % (len(self.directions), self.num_directions)
            )
        self.directions = [as_direction_pair(d) for d in self.directions]
        log = np.asarray(self.rmse_history, dtype=np.float64)
        if log.size and np.any(np.diff(log) > _MONOTONE_SLACK):
            raise DataError("residual history is not non-increasing")

    @property
    def is_sparse(self) -> bool:
        return isinstance(self.reflections, list)

    @property
    def reflection_length(self) -> int:
        if self.is_sparse:
            return self.reflections[0].length
        return self.reflections.shape[1]

    @property
    def num_directions(self) -> int:
        return len(self.reflections)

    @property
    def num_taps(self) -> int:
        return self.resonance_taps.size + self.reflection_length - 1

    def reflection(self, i: int) -> np.ndarray:
        """Dense reflection filter for direction ``i``."""
        if self.is_sparse:
            return self.reflections[i].to_dense()
        return np.asarray(self.reflections[i], dtype=np.float64)

    def nnze(self, i: int) -> int:
        """Non-zero entry count of reflection ``i``."""
        if self.is_sparse:
            return len(self.reflections[i].indices)
        return int(np.count_nonzero(self.reflections[i]))

    def reconstruct(self, directions=None) -> np.ndarray:
        """Rebuild impulse responses as resonance-by-reflection convolutions.

        Returns a ``(num_taps, len(directions))`` matrix; ``directions``
        defaults to all of them in order.
        """
        if directions is None:
            directions = range(self.num_directions)
        out = np.empty((self.num_taps, len(directions)))
        for col, i in enumerate(directions):
            out[:, col] = np.convolve(self.resonance_taps, self.reflection(i))
        return out


def solve_resonance(X: np.ndarray, G: np.ndarray,
                    ridge_scale: float = DEFAULT_RIDGE_SCALE) -> np.ndarray:
    """Least-squares resonance taps for fixed reflections.

    Restricting the Toeplitz matrix to its band turns the normal equations
    into a small symmetric Toeplitz system: entry ``(p, q)`` of the system
    matrix depends only on ``|p - q|`` and equals the sum of that diagonal of
    ``G.T @ G``, while the right-hand side collects the subdiagonal sums of
    ``X @ G``.  Returns taps ordered main diagonal first; a relative ridge
    is added once if the plain solve reports a singular system.
    """
    X = np.asarray(X, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    num_taps, num_directions = X.shape
    if G.shape[0] != num_directions:
        raise DataError(
            "X has %d directions but G has %d rows" % (num_directions, G.shape[0])
        )
    reflection_length = G.shape[1]
    num_free = num_taps - reflection_length + 1
    if num_free < 1:
        raise DataError("reflection filters cannot be longer than the responses")

    gram = G.T @ G
    # np.trace returns 0.0 for offsets past the edge of the matrix, which is
    # exactly the value these sums should have there.
    diag_sums = np.array([np.trace(gram, offset=-d) for d in range(num_free)])
    system = diag_sums[np.abs(np.subtract.outer(np.arange(num_free), np.arange(num_free)))]
    correlation = X @ G
    rhs = np.array([np.trace(correlation, offset=-p) for p in range(num_free)])

    try:
        return np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError:
        ridge = ridge_scale * np.trace(system) / num_free
        try:
            return np.linalg.solve(system + ridge * np.eye(num_free), rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                "resonance system is singular even with ridge; "
                "reflections are degenerate"
            ) from exc


def update_reflections(X: np.ndarray, F: np.ndarray, G: np.ndarray,
                       eps: float = DEFAULT_UPDATE_EPS) -> np.ndarray:
    """One multiplicative semi-NMF step on the non-negative reflections.

    Splits each factor matrix into positive and negative parts so the update
    ``G * sqrt(num / den)`` stays non-negative and, for the fixed dense
    resonance matrix ``F``, never increases ``||X - F @ G.T||``.  ``eps``
    guards the denominator against 0/0.
    """
    XtF = X.T @ F
    FtF = F.T @ F
    num = np.maximum(XtF, 0.0) + G @ np.maximum(-FtF, 0.0)
    den = np.maximum(-XtF, 0.0) + G @ np.maximum(FtF, 0.0) + eps
    return G * np.sqrt(num / den)


def factorize(
    X: np.ndarray,
    reflection_length: int,
    num_iters: int = 50,
    seed: int = 0,
    sample_rate_hz: float = 0.0,
    directions: list | None = None,
    early_stop: bool = False,
    update_eps: float = DEFAULT_UPDATE_EPS,
    ridge_scale: float = DEFAULT_RIDGE_SCALE,
) -> FactorizedModel:
    """Alternate resonance solves and reflection updates for ``num_iters``.

    Reflections start from seeded uniform draws on (0, 1].  Every iteration
    solves the resonance taps exactly for the current reflections, takes one
    multiplicative step on the reflections, and logs the reconstruction
    RMSE, so ``rmse_history`` is non-increasing with one entry per
    iteration.  A reflection row that dies (becomes exactly zero) on the
    very first update is redrawn once; if a redrawn row dies again the
    input direction is considered degenerate and training aborts.  A row
    that reaches exact zero later is left there: the multiplicative update
    only lands on zero when zero satisfies the optimality conditions for
    the current resonance filter, and reseeding such a row would push the
    logged RMSE back up.

    With ``early_stop`` the loop ends early once the RMSE improves by less
    than 1e-10 on three consecutive iterations.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DataError("expected a (num_taps, num_directions) matrix")
    if not np.all(np.isfinite(X)):
        raise DataError("input matrix contains non-finite samples")
    num_taps, num_directions = X.shape
    if not 1 <= reflection_length <= num_taps:
        raise DataError(
            "reflection length must be in [1, %d], got %d" % (num_taps, reflection_length)
        )
    if num_iters < 1:
        raise DataError("need at least one iteration")

    rng = np.random.default_rng(seed)
    G = 1.0 - rng.random((num_directions, reflection_length))
    history = []
    taps = None
    stall = 0
    redrawn = set()
    for iteration in range(num_iters):
        taps = solve_resonance(X, G, ridge_scale=ridge_scale)
        F = params_from_resonance_taps(taps, num_taps, reflection_length).to_dense()
        G = update_reflections(X, F, G, eps=update_eps)

        dead = np.flatnonzero(~G.any(axis=1))
        for row in dead:
            if row in redrawn:
                raise NumericalError(
                    "reflection row %d collapsed to zero twice; "
                    "input direction %d may be degenerate" % (row, row)
                )
            if iteration == 0:
                redrawn.add(int(row))
                G[row] = 1.0 - rng.random(reflection_length)

        history.append(metrics.rmse(X, F @ G.T))
        if early_stop and len(history) >= 2:
            stall = stall + 1 if history[-2] - history[-1] < 1e-10 else 0
            if stall >= 3:
                break
    return FactorizedModel(
        resonance_taps=taps,
        reflections=G,
        sample_rate_hz=sample_rate_hz,
        directions=list(directions or []),
        seed=seed,
        rmse_history=history,
    )


def train(
    bundle: HrirBundle,
    reflection_length: int,
    num_iters: int = 50,
    seed: int = 0,
    early_stop: bool = False,
) -> FactorizedModel:
    """Fit a bundle, carrying its rate and directions into the model.

    Warns (but proceeds) when the bundle has not been through the full
    preprocessing pipeline, since the factorization assumes minimum-phase,
    delay-free, normalized responses.
    """
    if not (bundle.minphase and bundle.delay_removed and bundle.normalized):
        warnings.warn(
            "bundle is not fully preprocessed (minphase/delay_removed/normalized); "
            "fitting anyway",
            stacklevel=2,
        )
    return factorize(
        bundle.impulse_responses,
        reflection_length,
        num_iters=num_iters,
        seed=seed,
        sample_rate_hz=bundle.sample_rate_hz,
        directions=bundle.directions,
        early_stop=early_stop,
    )


def save_model(model: FactorizedModel, path: str) -> None:
    """Write a model to a single JSON file.

    Dense reflection matrices are stored row-major under ``G``; sparse ones
    store per-direction index/value pairs there instead, alongside the
    sparsification settings that produced them.
    """
    if model.is_sparse:
        G = [
            {
                "indices": [int(i) for i in flt.indices],
                "values": [float(v) for v in flt.values],
            }
            for flt in model.reflections
        ]
    else:
        G = np.asarray(model.reflections).tolist()
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "M": model.num_taps,
        "N": model.num_directions,
        "K": model.reflection_length,
        "sample_rate_hz": float(model.sample_rate_hz),
        "seed": int(model.seed),
        "f": model.resonance_taps.tolist(),
        "G": G,
        "training_log": [float(v) for v in model.rmse_history],
        "directions": list(model.directions),
    }
    if model.sparsify_info is not None:
        doc.update(model.sparsify_info)
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_model(path: str) -> FactorizedModel:
    """Read a model written by :func:`save_model`."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError("no model file at %s" % path) from None
    except json.JSONDecodeError as exc:
        raise DataError("model file is not valid JSON: %s" % exc) from None
    if doc.get("format_version") != MODEL_FORMAT_VERSION or "f" not in doc:
        raise DataError("%s is not a recognized model file" % path)

    G = doc["G"]
    sparsify_info = None
    if G and isinstance(G[0], dict):
        from .sparsify import SparseFilter

        reflections = [
            SparseFilter(
                indices=np.asarray(entry["indices"], dtype=np.int64),
                values=np.asarray(entry["values"], dtype=np.float64),
                length=int(doc["K"]),
            )
            for entry in G
        ]
        sparsify_info = {
            key: doc[key]
            for key in ("lambda", "transform", "prune_threshold", "per_direction")
            if key in doc
        }
    else:
        reflections = np.asarray(G, dtype=np.float64)

    model = FactorizedModel(
        resonance_taps=np.asarray(doc["f"], dtype=np.float64),
        reflections=reflections,
        sample_rate_hz=float(doc.get("sample_rate_hz", 0.0)),
        directions=list(doc.get("directions", [])),
        seed=int(doc.get("seed", 0)),
        rmse_history=list(doc.get("training_log", [])),
        sparsify_info=sparsify_info or None,
    )
    if model.num_taps != doc["M"] or model.num_directions != doc["N"]:
        raise DataError("model dimensions disagree with the stored metadata")
    return model
