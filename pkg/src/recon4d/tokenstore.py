"""Persistent scene-token memory with a voxel index and visibility filtering."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ContractError, FormatError
from .geometry import CameraPose, Intrinsics, in_frustum_mask

DEFAULT_BUDGET = 3600
SNAPSHOT_MAGIC = b"UFOS"
SNAPSHOT_VERSION = 1


@dataclass
class SceneToken:
    id: int
    position: np.ndarray
    feature: np.ndarray
    birth_time: float
    birth_frame: int


class SceneTokenStore:
    """Append-only token table (rows never move) plus a uniform voxel grid.

    ``positions`` and ``features`` are :class:`~recon4d.numerics.Tensor` so a
    training unroll can backpropagate through stored tokens.
    """

    def __init__(self, dim: int, cell_size: float = 4.0):
        self.dim = int(dim)
        self.cell_size = float(cell_size)
        self.ids = np.zeros(0, dtype=np.int64)
        self.positions = nx.Tensor(np.zeros((0, 3)))
        self.features = nx.Tensor(np.zeros((0, self.dim)))
        self.birth_time = np.zeros(0, dtype=np.float64)
        self.birth_frame = np.zeros(0, dtype=np.int64)
        self.next_id = 0
        self._row_of: dict[int, int] = {}
        self._cells: dict[tuple[int, int, int], set[int]] = {}
        self._cell_of = np.zeros((0, 3), dtype=np.int64)
        self._cell_cache: tuple[np.ndarray, list] | None = None

    def __len__(self) -> int:
        return len(self.ids)

    # -- index maintenance ---------------------------------------------------------
    def _cells_for(self, pos: np.ndarray) -> np.ndarray:
        return np.floor(np.asarray(pos, dtype=np.float64) / self.cell_size).astype(np.int64)

    def _index_rows(self, rows: np.ndarray, fresh: bool = False) -> None:
        if len(rows) == 0:
            return
        new_cells = self._cells_for(self.positions.data[rows])
        for r, cell in zip(rows.tolist(), map(tuple, new_cells.tolist())):
            if not fresh:
                old = tuple(self._cell_of[r].tolist())
                if old == cell:
                    continue
                bucket = self._cells[old]
                bucket.discard(r)
                if not bucket:
                    del self._cells[old]
            self._cells.setdefault(cell, set()).add(r)
        self._cell_of[rows] = new_cells
        self._cell_cache = None

    def check_index(self) -> bool:
        """True when every row sits in exactly one cell matching its position."""
        cells = self._cells_for(self.positions.data) if len(self) else np.zeros((0, 3), np.int64)
        seen = np.zeros(len(self), dtype=int)
        for cell, rows in self._cells.items():
            for r in rows:
                seen[r] += 1
                if tuple(cells[r].tolist()) != cell:
                    return False
        return bool(np.all(seen == 1))

    def _occupied(self) -> tuple[np.ndarray, list]:
        if self._cell_cache is None:
            keys = list(self._cells.keys())
            arr = np.array(keys, dtype=np.float64).reshape(-1, 3)
            self._cell_cache = (arr, keys)
        return self._cell_cache

    # -- accessors -------------------------------------------------------------------
    def row_of(self, token_id: int) -> int:
        return self._row_of[int(token_id)]

    def rows_of(self, ids: Sequence[int]) -> np.ndarray:
        try:
            return np.array([self._row_of[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise ContractError(f"unknown token id {exc.args[0]}") from None

    def token(self, token_id: int) -> SceneToken:
        r = self.row_of(token_id)
        return SceneToken(int(self.ids[r]), self.positions.data[r].copy(), self.features.data[r].copy(),
                          float(self.birth_time[r]), int(self.birth_frame[r]))

    def tokens(self) -> list[SceneToken]:
        return [self.token(i) for i in self.ids.tolist()]

    def allocate_ids(self, n: int) -> np.ndarray:
        out = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        self.next_id += n
        return out

    def detach(self) -> None:
        """Cut the autodiff history of stored tensors (truncated backprop)."""
        self.positions = self.positions.detach()
        self.features = self.features.detach()

    def copy(self) -> "SceneTokenStore":
        other = SceneTokenStore(self.dim, self.cell_size)
        other.append(self.ids.copy(), self.positions.detach(), self.features.detach(),
                     self.birth_time.copy(), self.birth_frame.copy())
        other.next_id = self.next_id
        return other

    # -- mutation --------------------------------------------------------------------
    def append(self, ids: np.ndarray, positions, features, birth_time, birth_frame) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        positions, features = nx.as_tensor(positions), nx.as_tensor(features)
        n = len(ids)
        if positions.shape != (n, 3) or features.shape != (n, self.dim):
            raise ContractError(f"new tokens: positions {positions.shape}, features {features.shape}, dim {self.dim}")
        if len(set(ids.tolist())) != n or any(int(i) in self._row_of for i in ids):
            raise ContractError("duplicate token id in new tokens")
        if n and not np.all(np.isfinite(positions.data)):
            raise ContractError("token positions must be finite")
        start = len(self.ids)
        self.ids = np.concatenate([self.ids, ids])
        self.positions = nx.concat([self.positions, positions], axis=0) if start else positions
        self.features = nx.concat([self.features, features], axis=0) if start else features
        # birth times are kept float32-exact so snapshots round-trip bit for bit
        bt = np.broadcast_to(np.asarray(birth_time, np.float32), (n,)).astype(np.float64)
        self.birth_time = np.concatenate([self.birth_time, bt])
        self.birth_frame = np.concatenate([self.birth_frame, np.broadcast_to(np.asarray(birth_frame, np.int64), (n,))])
        for k, i in enumerate(ids.tolist()):
            self._row_of[i] = start + k
        if n:
            self.next_id = max(self.next_id, int(ids.max()) + 1)
        self._cell_of = np.concatenate([self._cell_of, np.zeros((n, 3), dtype=np.int64)])
        self._index_rows(np.arange(start, start + n), fresh=True)

    def replace(self, ids: Sequence[int], positions, features) -> None:
        """Overwrite the given tokens in place (same ids, same rows)."""
        rows = self.rows_of(ids)
        if len(rows) == 0:
            return
        self.positions = nx.index_update(self.positions, rows, positions)
        self.features = nx.index_update(self.features, rows, features)
        self._index_rows(rows)


# -- visibility --------------------------------------------------------------------
def _cell_candidates(store: SceneTokenStore, poses, intrinsics) -> np.ndarray:
    centers, keys = store._occupied()
    if len(keys) == 0:
        return np.zeros(0, dtype=np.int64)
    centers = (centers + 0.5) * store.cell_size
    radius = store.cell_size * np.sqrt(3) / 2
    keep = np.zeros(len(keys), dtype=bool)
    for pose, K in zip(poses, intrinsics):
        cfw = pose.camera_from_world()
        pc = centers @ cfw[:3, :3].T + cfw[:3, 3]
        ok = (pc[:, 2] >= K.near - radius) & (pc[:, 2] <= K.far + radius)
        # four side planes through the optical center
        for n in ((K.fx, 0.0, K.cx), (-K.fx, 0.0, K.width - K.cx), (0.0, K.fy, K.cy), (0.0, -K.fy, K.height - K.cy)):
            nv = np.asarray(n) / np.linalg.norm(n)
            ok &= pc @ nv >= -radius
        keep |= ok
    rows = [r for k, key in enumerate(keys) if keep[k] for r in store._cells[key]]
    return np.array(sorted(rows), dtype=np.int64)


def select_visible_rows(store: SceneTokenStore, poses: Sequence[CameraPose] | CameraPose,
                        intrinsics: Sequence[Intrinsics] | Intrinsics, budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """Rows of tokens inside any camera frustum, nearest-first to the first camera.

    Ties in distance are broken by ascending id; at most ``budget`` rows.
    """
    if budget < 0:
        raise ContractError("budget must be >= 0")
    if isinstance(poses, CameraPose):
        poses = [poses]
    if isinstance(intrinsics, Intrinsics):
        intrinsics = [intrinsics] * len(poses)
    if len(store) == 0 or budget == 0:
        return np.zeros(0, dtype=np.int64)
    cand = _cell_candidates(store, poses, intrinsics)
    if len(cand) == 0:
        return cand
    pts = store.positions.data[cand].astype(np.float64)
    vis = np.zeros(len(cand), dtype=bool)
    for pose, K in zip(poses, intrinsics):
        vis |= in_frustum_mask(pts, pose, K)
    cand, pts = cand[vis], pts[vis]
    dist = np.linalg.norm(pts - poses[0].center, axis=1)
    order = np.lexsort((store.ids[cand], dist))
    return cand[order[:budget]]


def select_visible(store: SceneTokenStore, poses, intrinsics, budget: int = DEFAULT_BUDGET) -> list[SceneToken]:
    rows = select_visible_rows(store, poses, intrinsics, budget)
    return [store.token(int(store.ids[r])) for r in rows]


def _check_merge(store: SceneTokenStore, visible_ids: Sequence[int], refined_ids: Sequence[int],
                 new_ids: Sequence[int]) -> None:
    vis = [int(i) for i in visible_ids]
    vis_set = set(vis)
    if len(vis_set) != len(vis):
        raise ContractError("visible ids must be unique")
    ref_ids = [int(i) for i in refined_ids]
    for i in ref_ids:
        if i not in vis_set:
            raise ContractError(f"refined token {i} is not in the visible set")
    if sorted(ref_ids) != sorted(vis):
        raise ContractError("refined tokens must be a bijection onto the visible set")
    new_ids = [int(i) for i in new_ids]
    if len(set(new_ids)) != len(new_ids) or any(i in store._row_of for i in new_ids):
        raise ContractError("new tokens must carry fresh, unique ids")


def merge(store: SceneTokenStore, visible_ids: Sequence[int], refined: Sequence[SceneToken],
          new_tokens: Sequence[SceneToken]) -> None:
    """Replace the visible tokens by their refined versions and append new ones."""
    _check_merge(store, visible_ids, [t.id for t in refined], [t.id for t in new_tokens])
    if refined:
        store.replace([t.id for t in refined], np.stack([t.position for t in refined]),
                      np.stack([t.feature for t in refined]))
    if new_tokens:
        store.append(np.array([t.id for t in new_tokens]), np.stack([t.position for t in new_tokens]),
                     np.stack([t.feature for t in new_tokens]),
                     np.array([t.birth_time for t in new_tokens]), np.array([t.birth_frame for t in new_tokens]))


def merge_tensors(store: SceneTokenStore, visible_ids, refined_positions, refined_features,
                  new_ids, new_positions, new_features, birth_time: float, birth_frame: int) -> None:
    """:func:`merge` for batched tensors, keeping the autodiff graph intact.

    Row ``k`` of the refined tensors belongs to ``visible_ids[k]``.
    """
    _check_merge(store, visible_ids, visible_ids, new_ids)
    if len(visible_ids):
        store.replace(visible_ids, refined_positions, refined_features)
    if len(new_ids):
        store.append(np.asarray(new_ids, np.int64), new_positions, new_features, birth_time, birth_frame)


# -- snapshot ----------------------------------------------------------------------
_HEADER = struct.Struct("<4sIIIQ")


def snapshot(store: SceneTokenStore, path: str | os.PathLike) -> None:
    """Write magic, version, D, count, next_id, then one fixed-size record per token."""
    n, d = len(store), store.dim
    rec = np.dtype([("id", "<u8"), ("pos", "<f4", (3,)), ("t", "<f4"), ("frame", "<u4"), ("feat", "<f4", (d,))])
    table = np.zeros(n, dtype=rec)
    table["id"] = store.ids
    table["pos"] = store.positions.data
    table["t"] = store.birth_time
    table["frame"] = store.birth_frame
    table["feat"] = store.features.data
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, d, n, store.next_id))
        fh.write(table.tobytes())


def restore(path: str | os.PathLike, cell_size: float = 4.0) -> SceneTokenStore:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated snapshot header")
    magic, version, d, n, next_id = _HEADER.unpack_from(buf)
    if magic != SNAPSHOT_MAGIC:
        raise FormatError(f"{path}: bad snapshot magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise FormatError(f"{path}: unsupported snapshot version {version}")
    rec = np.dtype([("id", "<u8"), ("pos", "<f4", (3,)), ("t", "<f4"), ("frame", "<u4"), ("feat", "<f4", (d,))])
    if len(buf) != _HEADER.size + n * rec.itemsize:
        raise FormatError(f"{path}: expected {n} token records, file size does not match")
    table = np.frombuffer(buf, dtype=rec, count=n, offset=_HEADER.size)
    store = SceneTokenStore(d, cell_size)
    store.append(table["id"].astype(np.int64), nx.Tensor(table["pos"].astype(np.float32)),
                 nx.Tensor(table["feat"].astype(np.float32)),
                 table["t"].astype(np.float64), table["frame"].astype(np.int64))
    store.next_id = int(next_id)
    return store
