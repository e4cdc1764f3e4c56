"""Embedding encoders: matrix factorization and LightGCN-style propagation.

Both encoders score a user-item pair as a dot product of *effective*
embeddings.  For MF the effective embeddings are the base rows; the propagated
encoder averages neighborhood-smoothed layers of the bipartite interaction
graph.  Propagation is linear, so gradients flow back through the transposed
propagation map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp

CHECKPOINT_VERSION = 1


class EncoderKind(str, Enum):
    MF = "MF"
    LIGHTGCN = "LightGCN"


@dataclass
class EncoderConfig:
    kind: EncoderKind = EncoderKind.MF
    d: int = 64
    num_layers: int = 2     # propagation depth, LightGCN only
    init_scale: float = 0.1

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "d": self.d,
                "num_layers": self.num_layers, "init_scale": self.init_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(EncoderKind(d["kind"]), int(d["d"]), int(d["num_layers"]),
                   float(d["init_scale"]))


@dataclass
class ModelParams:
    user_emb: np.ndarray  # (num_users, d)
    item_emb: np.ndarray  # (num_items, d)

    @property
    def num_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def d(self) -> int:
        return self.user_emb.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(self.user_emb.copy(), self.item_emb.copy())


def init_params(config: EncoderConfig, num_users: int, num_items: int,
                seed: int) -> ModelParams:
    """Gaussian N(0, init_scale^2) embeddings; user block drawn before items."""
    rng = np.random.default_rng(seed)
    user_emb = rng.normal(0.0, config.init_scale, size=(num_users, config.d))
    item_emb = rng.normal(0.0, config.init_scale, size=(num_items, config.d))
    return ModelParams(user_emb, item_emb)


def build_adjacency(num_users: int, num_items: int, user_ids, item_ids):
    """Symmetric-normalized bipartite adjacency over stacked user+item nodes.

    Entry (u, N+i) = 1/sqrt(deg_u * deg_i) for each interaction edge; isolated
    nodes simply have empty rows, so their propagated layers are zero.
    """
    user_ids = np.asarray(user_ids, dtype=np.int64)
    item_ids = np.asarray(item_ids, dtype=np.int64)
    edges = np.unique(np.stack([user_ids, item_ids], axis=1), axis=0)
    u, i = edges[:, 0], edges[:, 1]
    deg_u = np.bincount(u, minlength=num_users).astype(np.float64)
    deg_i = np.bincount(i, minlength=num_items).astype(np.float64)
    vals = 1.0 / np.sqrt(deg_u[u] * deg_i[i])
    n = num_users + num_items
    rows = np.concatenate([u, num_users + i])
    cols = np.concatenate([num_users + i, u])
    data = np.concatenate([vals, vals])
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def propagate(params: ModelParams, adjacency, num_layers: int):
    """Mean of propagation layers 0..L of the stacked embedding matrix."""
    emb = np.vstack([params.user_emb, params.item_emb])
    acc = emb.copy()
    cur = emb
    for _ in range(num_layers):
        cur = adjacency @ cur
        acc += cur
    out = acc / (num_layers + 1)
    return out[:params.num_users], out[params.num_users:]


def backpropagate(grad_user: np.ndarray, grad_item: np.ndarray, adjacency,
                  num_layers: int):
    """Pull gradients on propagated embeddings back to the base embeddings.

    The propagation map is M = mean of A^l for l in 0..L, so the reverse map
    is M transpose applied to the stacked cotangent.
    """
    num_users = grad_user.shape[0]
    g = np.vstack([grad_user, grad_item])
    acc = g.copy()
    cur = g
    at = adjacency.T.tocsr()
    for _ in range(num_layers):
        cur = at @ cur
        acc += cur
    out = acc / (num_layers + 1)
    return out[:num_users], out[num_users:]


class ParamView:
    """Flattened, write-through window onto one user row plus an item scope.

    Layout: the user row first, then item rows in ascending item id.  The
    scope is deduplicated; it must be non-empty.
    """

    def __init__(self, params: ModelParams, user_id: int, item_scope):
        scope = np.unique(np.asarray(item_scope, dtype=np.int64))
        if scope.size == 0:
            raise ValueError("item scope must be non-empty")
        if not (0 <= user_id < params.num_users):
            raise IndexError(f"user id {user_id} out of range")
        if scope[0] < 0 or scope[-1] >= params.num_items:
            raise IndexError("item scope contains out-of-range ids")
        self.params = params
        self.user_id = int(user_id)
        self.item_ids = scope
        self.d = params.d

    def __len__(self) -> int:
        return self.d * (1 + len(self.item_ids))

    def get_vector(self) -> np.ndarray:
        return np.concatenate([self.params.user_emb[self.user_id],
                               self.params.item_emb[self.item_ids].ravel()])

    def set_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (len(self),):
            raise ValueError(f"expected vector of length {len(self)}, "
                             f"got shape {vec.shape}")
        d = self.d
        self.params.user_emb[self.user_id] = vec[:d]
        self.params.item_emb[self.item_ids] = vec[d:].reshape(-1, d)

    def split(self, vec: np.ndarray):
        """View a flat vector as (user row, item rows aligned to item_ids)."""
        d = self.d
        return vec[:d], vec[d:].reshape(-1, d)


def param_view(params: ModelParams, user_id: int, item_scope) -> ParamView:
    return ParamView(params, user_id, item_scope)


class Encoder:
    """Binds an EncoderConfig (and interaction graph, when propagated) to data.

    ``attach_graph`` must be called with the training edges before any scoring
    when the kind is LightGCN.  Propagated embeddings are recomputed from the
    base embeddings on every call; nothing is cached across parameter updates.
    """

    def __init__(self, config: EncoderConfig, num_users: int, num_items: int):
        self.config = config
        self.num_users = num_users
        self.num_items = num_items
        self.adjacency = None

    def attach_graph(self, user_ids, item_ids) -> None:
        self.adjacency = build_adjacency(self.num_users, self.num_items,
                                         user_ids, item_ids)

    @property
    def propagated(self) -> bool:
        return self.config.kind == EncoderKind.LIGHTGCN

    def _require_graph(self):
        if self.adjacency is None:
            raise RuntimeError("propagated encoder needs attach_graph() first")

    def effective(self, params: ModelParams, view: ParamView | None = None,
                  vector: np.ndarray | None = None):
        """Full effective (U, V) matrices, optionally with a view override.

        With ``view``/``vector`` the base rows covered by the view are
        replaced by the vector before propagation; base params are untouched.
        """
        if view is not None and vector is not None:
            u_row, v_rows = view.split(vector)
            user_emb = params.user_emb.copy()
            item_emb = params.item_emb.copy()
            user_emb[view.user_id] = u_row
            item_emb[view.item_ids] = v_rows
            params = ModelParams(user_emb, item_emb)
        if not self.propagated:
            return params.user_emb, params.item_emb
        self._require_graph()
        return propagate(params, self.adjacency, self.config.num_layers)

    def score(self, params: ModelParams, user_id: int, item_id: int) -> float:
        if not (0 <= user_id < params.num_users):
            raise IndexError(f"user id {user_id} out of range")
        if not (0 <= item_id < params.num_items):
            raise IndexError(f"item id {item_id} out of range")
        u_eff, v_eff = self.effective(params)
        return float(u_eff[user_id] @ v_eff[item_id])

    def user_rows(self, params: ModelParams, view: ParamView,
                  vector: np.ndarray | None = None):
        """Effective user row and item rows aligned to the view's scope."""
        if not self.propagated:
            if vector is None:
                return (params.user_emb[view.user_id],
                        params.item_emb[view.item_ids])
            return view.split(vector)
        u_eff, v_eff = self.effective(params, view if vector is not None else None,
                                      vector)
        return u_eff[view.user_id], v_eff[view.item_ids]

    def to_view_grad(self, view: ParamView, grad_u: np.ndarray,
                     grad_rows: np.ndarray) -> np.ndarray:
        """Map gradients on effective (user row, scope rows) to view coords.

        For MF this is the identity.  For the propagated encoder the sparse
        cotangent is pulled back through the propagation map and restricted to
        the view's coordinates (all other parameters held fixed).
        """
        if not self.propagated:
            return np.concatenate([grad_u, grad_rows.ravel()])
        self._require_graph()
        g_user = np.zeros((self.num_users, view.d))
        g_item = np.zeros((self.num_items, view.d))
        g_user[view.user_id] = grad_u
        np.add.at(g_item, view.item_ids, grad_rows)
        b_user, b_item = backpropagate(g_user, g_item, self.adjacency,
                                       self.config.num_layers)
        return np.concatenate([b_user[view.user_id],
                               b_item[view.item_ids].ravel()])


def save_checkpoint(path, params: ModelParams, config: EncoderConfig,
                    seed: int) -> None:
    """Write params + encoder config + seed as a single npz archive."""
    meta = json.dumps({"version": CHECKPOINT_VERSION,
                       "config": config.to_dict(), "seed": int(seed)})
    np.savez(path, user_emb=params.user_emb, item_emb=params.item_emb,
             meta=np.frombuffer(meta.encode(), dtype=np.uint8))


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``: returns (params, config, seed)."""
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["meta"].tobytes()).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params = ModelParams(blob["user_emb"].copy(), blob["item_emb"].copy())
    return params, EncoderConfig.from_dict(meta["config"]), int(meta["seed"])
