"""ANN kernels with a compiled core and a pure-Python twin.

The compiled extension (`_graph_c`, Cython) and the numpy fallback
(`_graph_py`) expose the same two entry points: `build_graph` and `Cursor`.
Selection happens at import time; set CONDRET_ANN_BACKEND=py or =c to force
one (forcing `c` when the extension is missing raises).
"""

import os

from . import _graph_py
from .graph import AnnConfig, AnnGraph, assign_levels, repair_connectivity

try:
    from . import _graph_c
except ImportError:
    _graph_c = None

_FORCED = os.environ.get("CONDRET_ANN_BACKEND", "auto").lower()


def available_backends():
    out = {"py": _graph_py}
    if _graph_c is not None:
        out["c"] = _graph_c
    return out


def get_backend(name=None):
    name = name or _FORCED
    if name in ("auto", ""):
        return _graph_c if _graph_c is not None else _graph_py
    if name == "py":
        return _graph_py
    if name == "c":
        if _graph_c is None:
            raise ImportError("compiled ANN backend requested but not built")
        return _graph_c
    raise ValueError(f"unknown ANN backend {name!r}")


def backend_name(mod=None):
    mod = mod or get_backend()
    return "c" if mod is _graph_c and mod is not None else "py"


def build_ann_graph(vectors, config: AnnConfig, backend=None) -> AnnGraph:
    """Assign levels, run the backend build, repair layer-0 connectivity."""
    import numpy as np

    config.validate()
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    if len(vectors) == 0:
        from ..errors import InvalidConfigError

        raise InvalidConfigError("cannot build a graph over an empty index")
    mod = backend or get_backend()
    levels = assign_levels(len(vectors), config.effective_level_multiplier, config.seed)
    adjs, degs, entry = mod.build_graph(vectors, levels, config.max_degree, config.build_beam_width)
    repair_connectivity(vectors, adjs[0], degs[0], config.max_degree)
    return AnnGraph(levels=levels, adjs=adjs, degs=degs, entry=int(entry), config=config)


def make_cursor(vectors, graph: AnnGraph, query, ef, backend=None):
    import numpy as np

    mod = backend or get_backend()
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    query = np.ascontiguousarray(query, dtype=np.float64)
    return mod.Cursor(vectors, graph.levels, graph.adjs, graph.degs, graph.entry, query, int(ef))
