"""Double-buffered global store of per-tile latent windows, serving halo queries during rollout."""
from typing import Dict, List, Tuple, Union
from pathlib import Path
import logging
import threading

import numpy as np

from src.exceptions import ArgumentError, ContractError
from src.grid import GridSpec, TileCoord, neighbours8
from src.obsio import read_checkpoint, write_checkpoint

logger = logging.getLogger(__name__)


class GlobalStateCache:
    """
    Per modality, a previous and a current buffer of shape
    [tiles_h, tiles_w, T, C_lat, th, tw].

    Queries read only the previous buffer; writes go only to the current one.
    When every tile of the current buffer has been written, the buffers swap,
    the current buffer is zeroed and the generation advances.
    """

    def __init__(self, spec: GridSpec, latent_dims: Dict[str, int], time_window: int, tokens_side: int):
        self.spec = spec
        self.latent_dims = dict(latent_dims)
        self.time_window = time_window
        self.tokens_side = tokens_side
        self.generation = 0
        self._lock = threading.Lock()
        self._prev = {m: np.zeros(self.buffer_shape(m), dtype=np.float32) for m in latent_dims}
        self._cur = {m: np.zeros(self.buffer_shape(m), dtype=np.float32) for m in latent_dims}
        self._written = np.zeros((spec.tiles_h, spec.tiles_w), dtype=bool)

    @property
    def modalities(self) -> List[str]:
        return list(self.latent_dims)

    def buffer_shape(self, modality: str) -> Tuple[int, ...]:
        g = self.tokens_side
        return (self.spec.tiles_h, self.spec.tiles_w, self.time_window, self.latent_dims[modality], g, g)

    def slot_shape(self, modality: str) -> Tuple[int, ...]:
        return self.buffer_shape(modality)[2:]

    def _check(self, coord: Tuple[int, int]) -> TileCoord:
        r, c = int(coord[0]), int(coord[1])
        if not (0 <= r < self.spec.tiles_h and 0 <= c < self.spec.tiles_w):
            raise ArgumentError(f"tile {(r, c)} outside {self.spec.tiles_h}x{self.spec.tiles_w}")
        return TileCoord(r, c)

    def previous(self, modality: str) -> np.ndarray:
        """Read-only view of the previous buffer."""
        view = self._prev[modality].view()
        view.flags.writeable = False
        return view

    def tile(self, modality: str, coord: Tuple[int, int]) -> np.ndarray:
        r, c = self._check(coord)
        return self._prev[modality][r, c].copy()

    def query_neighbours(self, coord: Tuple[int, int]) -> Dict[str, List[np.ndarray]]:
        """Copies of the 8 neighbours of `coord` from the previous buffer, in neighbours8 order."""
        coord = self._check(coord)
        order = neighbours8(coord, self.spec.tiles_h, self.spec.tiles_w)
        return {m: [self._prev[m][r, c].copy() for r, c in order] for m in self.latent_dims}

    def update_cache(self, coord: Tuple[int, int], pred: Dict[str, np.ndarray]) -> bool:
        """Write one tile's prediction; returns True when this write completed the sweep and swapped."""
        r, c = self._check(coord)
        for m in self.latent_dims:
            if m not in pred:
                raise ContractError(f"prediction for tile {(r, c)} lacks modality {m}")
            if pred[m].shape != self.slot_shape(m):
                raise ContractError(f"{m}: prediction {pred[m].shape} does not fit slot {self.slot_shape(m)}")
        with self._lock:
            if self._written[r, c]:
                raise ContractError(f"tile {(r, c)} written twice in generation {self.generation}")
            for m in self.latent_dims:
                self._cur[m][r, c] = pred[m]
            self._written[r, c] = True
            if not self._written.all():
                return False
            self._prev, self._cur = self._cur, self._prev
            for buffer in self._cur.values():
                buffer.fill(0.0)
            self._written[:] = False
            self.generation += 1
        logger.debug(f"State cache swapped to generation {self.generation}")
        return True

    def load_previous(self, tokens: Dict[str, np.ndarray]) -> None:
        """Seed the previous buffer, e.g. from assimilated tokens before the first forecast step."""
        for m in self.latent_dims:
            if tokens[m].shape != self.buffer_shape(m):
                raise ContractError(f"{m}: tokens {tokens[m].shape} do not fit buffer {self.buffer_shape(m)}")
        with self._lock:
            for m in self.latent_dims:
                self._prev[m][...] = tokens[m]

    def dump(self, path: Union[str, Path]) -> Path:
        arrays = {}
        for m in self.latent_dims:
            arrays[f"{m}.prev"] = self._prev[m]
            arrays[f"{m}.cur"] = self._cur[m]
        arrays["written"] = self._written.astype(np.float32)
        meta = {
            "kind": "statecache",
            "generation": str(self.generation),
            "grid": f"{self.spec.height},{self.spec.width},{self.spec.tile}",
            "latent_dims": ",".join(f"{m}:{d}" for m, d in self.latent_dims.items()),
            "time_window": str(self.time_window),
            "tokens_side": str(self.tokens_side),
        }
        return write_checkpoint(arrays, path, meta=meta)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GlobalStateCache":
        arrays, meta = read_checkpoint(path)
        if meta.get("kind") != "statecache":
            raise ContractError(f"{path} is a {meta.get('kind')!r} checkpoint, expected 'statecache'")
        height, width, tile = (int(v) for v in meta["grid"].split(","))
        dims = {}
        for item in meta["latent_dims"].split(","):
            name, _, d = item.partition(":")
            dims[name] = int(d)
        cache = cls(GridSpec(height=height, width=width, tile=tile), dims,
                    int(meta["time_window"]), int(meta["tokens_side"]))
        for m in dims:
            cache._prev[m][...] = arrays[f"{m}.prev"]
            cache._cur[m][...] = arrays[f"{m}.cur"]
        cache._written[...] = arrays["written"] > 0.5
        cache.generation = int(meta["generation"])
        return cache


def init_cache(spec: GridSpec, latent_dims: Dict[str, int], time_window: int, tokens_side: int) -> GlobalStateCache:
    return GlobalStateCache(spec, latent_dims, time_window, tokens_side)
