"""Block-tridiagonal generator of the tagged-station QBD.

Two assembly modes are supported:

``standard``
    Level moves keep the environment state and environment moves keep the
    level: ``up[k] = diag(xi_k)``, ``down[k] = diag(eta_k)``,
    ``local[k] = W - diag(xi_k + eta_k)``.  This is a conservative generator
    and is the default.
``paper-literal``
    Queue rates are multiplied by environment transition rates, so level
    moves happen jointly with environment switches:
    ``up[k][i, j] = xi_{k,i} w_{i,j}`` (``i != j``), ``down`` likewise with
    ``eta``, and ``local[k] = diag((xi_{k,i} + eta_{k,i}) w_{i,i})``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidParameterError
from .rates import ClampCounter, ModelParams, arrival_rates, service_rates


class AssemblyMode(str, Enum):
    STANDARD = "standard"
    PAPER_LITERAL = "paper-literal"

    @classmethod
    def parse(cls, value) -> "AssemblyMode":
        return value if isinstance(value, cls) else cls(str(value))


@dataclass(frozen=True)
class BlockTridiagonalGenerator:
    """Level blocks of a QBD generator, indexed by level offset ``k + L``.

    ``down[0]`` and ``up[-1]`` are unused and held at zero.
    """

    down: np.ndarray   # (n, m, m)
    local: np.ndarray  # (n, m, m)
    up: np.ndarray     # (n, m, m)
    mode: AssemblyMode = AssemblyMode.STANDARD

    @property
    def n_levels(self) -> int:
        return self.local.shape[0]

    @property
    def m(self) -> int:
        return self.local.shape[1]

    def to_dense(self) -> np.ndarray:
        n, m = self.n_levels, self.m
        V = np.zeros((n * m, n * m))
        for k in range(n):
            s = slice(k * m, (k + 1) * m)
            V[s, s] = self.local[k]
            if k + 1 < n:
                V[s, (k + 1) * m:(k + 2) * m] = self.up[k]
            if k > 0:
                V[s, (k - 1) * m:k * m] = self.down[k]
        return V

    def left_multiply(self, y) -> np.ndarray:
        """Return ``y V`` as an ``(n, m)`` array without forming ``V``."""
        Y = np.asarray(y, dtype=float).reshape(self.n_levels, self.m)
        out = np.einsum("ki,kij->kj", Y, self.local)
        out[1:] += np.einsum("ki,kij->kj", Y[:-1], self.up[:-1])
        out[:-1] += np.einsum("ki,kij->kj", Y[1:], self.down[1:])
        return out

    def row_sums(self) -> np.ndarray:
        s = self.local.sum(axis=2)
        s[:-1] += self.up[:-1].sum(axis=2)
        s[1:] += self.down[1:].sum(axis=2)
        return s

    def to_csv(self, path, header_lines: list[str] = ()) -> None:
        """Write the dense matrix, comma-delimited, with ``#`` metadata lines."""
        V = self.to_dense()
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write(f"# mode={self.mode.value} levels={self.n_levels} blockdim={self.m}\n")
            np.savetxt(fh, V, delimiter=",", fmt="%.17g")


def row_sum_residual(V) -> float:
    """``max |row sum|`` of an assembled generator (block or dense)."""
    if isinstance(V, BlockTridiagonalGenerator):
        return float(np.abs(V.row_sums()).max())
    return float(np.abs(np.asarray(V).sum(axis=1)).max())


def assemble_from_rates(xi: np.ndarray, eta: np.ndarray, W: np.ndarray, mode=AssemblyMode.STANDARD) -> BlockTridiagonalGenerator:
    """Assemble blocks from frozen rate arrays ``xi``/``eta`` of shape ``(n, m)``.

    ``xi[-1]`` and ``eta[0]`` are ignored (no move above the top or below the floor).
    """
    mode = AssemblyMode.parse(mode)
    xi = np.array(xi, dtype=float)
    eta = np.array(eta, dtype=float)
    W = np.asarray(W, dtype=float)
    n, m = xi.shape
    xi[-1] = 0.0
    eta[0] = 0.0
    down = np.zeros((n, m, m))
    up = np.zeros((n, m, m))
    if mode is AssemblyMode.STANDARD:
        idx = np.arange(m)
        up[:, idx, idx] = xi
        down[:, idx, idx] = eta
        local = np.broadcast_to(W, (n, m, m)).copy()
        local[:, idx, idx] -= xi + eta
    else:
        if m < 2:
            # every off-diagonal entry of W is zero, so the whole generator would vanish
            raise InvalidParameterError("paper-literal assembly needs at least two environment states")
        w_off = W - np.diag(np.diag(W))
        w_diag = np.diag(W)
        up = xi[:, :, None] * w_off[None]
        down = eta[:, :, None] * w_off[None]
        local = np.zeros((n, m, m))
        idx = np.arange(m)
        local[:, idx, idx] = (xi + eta) * w_diag[None, :]
    down[0] = 0.0
    up[-1] = 0.0
    return BlockTridiagonalGenerator(down=down, local=local, up=up, mode=mode)


def assemble(y, p: ModelParams, n: int | None = None, mode=AssemblyMode.STANDARD,
             diagnostics: ClampCounter | None = None) -> BlockTridiagonalGenerator:
    """Generator ``V_y`` at mean-field vector ``y`` (finite ``n`` or the limit when ``n is None``)."""
    xi = arrival_rates(y, p, n=n, diagnostics=diagnostics)
    eta = service_rates(p)
    return assemble_from_rates(xi, eta, p.env.W, mode)


def drift(y, p: ModelParams, n: int | None = None, mode=AssemblyMode.STANDARD,
          diagnostics: ClampCounter | None = None) -> np.ndarray:
    """Mean-field vector field ``y V_y`` as an ``(n_levels, m)`` array."""
    mode = AssemblyMode.parse(mode)
    Y = np.asarray(y, dtype=float).reshape(p.n_levels, p.m)
    if mode is not AssemblyMode.STANDARD:
        return assemble(Y, p, n=n, mode=mode, diagnostics=diagnostics).left_multiply(Y)
    xi = arrival_rates(Y, p, n=n, diagnostics=diagnostics)
    eta = service_rates(p)
    up_flow = Y * xi
    down_flow = Y * eta
    out = Y @ p.env.W - up_flow - down_flow
    out[1:] += up_flow[:-1]
    out[:-1] += down_flow[1:]
    return out
