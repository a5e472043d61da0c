"""Mesh-aware data layer between geometry and traced expressions.

A Domain keeps two stores: the *mesh pool* (full tagged point sets, batch
axis 1) and the *runtime context* (the arrays the solver actually trains
on, shaped ``(B, T, N, D)`` for spatial tags).  Temporal structure lives in
a separate ``__time__`` context entry of shape ``(B, T, 1, 1)``.
"""

import numpy as np

from . import mesh as meshmod
from . import trace as tr
from .errors import (
    BadShape,
    CountExceedsPool,
    NotABoundaryTag,
    TagMismatch,
    UnknownTag,
    UnsupportedGeometry,
)
from .tensor import Tensor

TIME_KEY = "__time__"


class ResampleStrategy:
    """Per-tag point refresh policy applied at outer-step boundaries."""

    KINDS = ("uniform-vertex-subset", "residual-weighted")

    def __init__(self, tag, kind, count, weights=None, seed=None):
        if kind not in self.KINDS:
            raise UnsupportedGeometry(f"unknown resample kind {kind!r}")
        self.tag = tag
        self.kind = kind
        self.count = int(count)
        self.weights = weights  # array | callable(domain) -> array
        self.seed = seed


class Domain:
    def __init__(self, mesh, time=None, batch=1):
        self.mesh = mesh
        self.connectivity = meshmod.Connectivity(mesh)
        self.batch = int(batch)
        self.time = tuple(time) if time is not None else None
        if self.time is not None:
            t0, t1, steps = self.time
            self.num_times = int(steps) + 1
            self.time_grid = np.linspace(float(t0), float(t1), self.num_times)
        else:
            self.num_times = 1
            self.time_grid = None

        self.mesh_pool = {}
        self.context = {}
        self.tensor_tags = {}
        self.resamplers = {}
        self._vars = {}          # ExprNode -> binding spec
        self.fem = None          # set by init_fem
        self._rng = np.random.default_rng(0)

        T = self.num_times
        for tag, idx in mesh.tags.items():
            coords = mesh.vertices[idx]                     # (N, D)
            pool = np.broadcast_to(coords[None, None], (1, T) + coords.shape)
            self.mesh_pool[tag] = np.ascontiguousarray(pool)
            ctx = np.broadcast_to(coords[None, None],
                                  (self.batch, T) + coords.shape)
            self.context[tag] = np.ascontiguousarray(ctx)
        if self.time is not None:
            tarr = self.time_grid.reshape(1, T, 1, 1)
            self.context[TIME_KEY] = np.ascontiguousarray(
                np.broadcast_to(tarr, (self.batch, T, 1, 1))
            )

    # -- inspection ----------------------------------------------------------

    @property
    def dim(self):
        return self.mesh.dim

    def tags(self):
        return sorted(self.mesh.tags)

    def pool_size(self, tag):
        return self.mesh_pool[tag].shape[2]

    # -- variables -------------------------------------------------------

    def variable(self, tag_or_name, tensor=None, split=None):
        """Create trace Variables bound to this domain's context.

        Tag form returns one Variable per coordinate column plus a final
        time Variable.  Tensor form registers `tensor` under the name and
        returns a single Variable bound to it.
        """
        name = tag_or_name
        if tensor is not None:
            arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(
                tensor, dtype=np.float64)
            if arr.ndim < 2 or arr.shape[0] != self.batch:
                raise BadShape(
                    f"tensor tag {name!r} must be shaped (B, T, ...); "
                    f"got {arr.shape} with B={self.batch}"
                )
            if arr.shape[1] not in (1, self.num_times):
                raise BadShape(
                    f"tensor tag {name!r} time extent {arr.shape[1]} "
                    f"incompatible with T={self.num_times}"
                )
            self.tensor_tags[name] = arr
            var = tr.variable(name)
            self._vars[var] = ("tensor", name)
            return var

        if name not in self.context and name not in self.mesh.tags:
            raise UnknownTag(f"unknown tag {name!r}; have {self.tags()}")
        if split is False:
            var = tr.variable(name)
            self._vars[var] = ("full", name)
            return var
        cols = self.context[name].shape[-1]
        out = []
        coord_names = ("x", "y", "z")
        for c in range(cols):
            label = coord_names[c] if c < 3 else f"c{c}"
            var = tr.variable(f"{name}:{label}")
            self._vars[var] = ("coord", name, c)
            out.append(var)
        tvar = tr.variable(f"{name}:t")
        self._vars[tvar] = ("time",)
        out.append(tvar)
        return tuple(out)

    def time_variable_of(self, var):
        return self._vars.get(var, (None,))[0] == "time"

    def binding_spec(self, var):
        return self._vars.get(var)

    def bindings(self, batch_idx=None):
        """Resolve every registered Variable against the current context.

        `batch_idx` selects rows along the batch axis (shared across tags).
        Returns a dict ExprNode -> Tensor.
        """
        out = {}
        for var, spec in self._vars.items():
            out[var] = Tensor(self._resolve(spec, batch_idx))
        return out

    def _resolve(self, spec, batch_idx):
        kind = spec[0]
        if kind == "coord":
            _, tag, c = spec
            arr = self.context[tag][..., c:c + 1]
        elif kind == "full":
            arr = self.context[spec[1]]
        elif kind == "time":
            if TIME_KEY in self.context:
                arr = self.context[TIME_KEY]
            else:
                # zero-width placeholder: using it in arithmetic fails loudly
                arr = np.zeros((self.batch, 1, 1, 0))
        elif kind == "tensor":
            arr = self.tensor_tags[spec[1]]
            if arr.ndim == 3:
                # (B, T, S) rides along the point axis as (B, T, 1, S)
                arr = arr[:, :, None, :]
        else:
            raise UnknownTag(f"bad binding spec {spec!r}")
        if batch_idx is not None:
            arr = arr[np.asarray(batch_idx)]
        return arr

    def variable_shapes(self, batch_idx=None):
        n = len(batch_idx) if batch_idx is not None else None
        shapes = {}
        for var, spec in self._vars.items():
            arr = self._resolve(spec, None)
            s = list(arr.shape)
            if n is not None:
                s[0] = n
            shapes[var] = tuple(s)
        return shapes

    # -- algebra -----------------------------------------------------------

    def scale(self, n):
        if int(n) < 1:
            raise BadShape("scale factor must be >= 1")
        return _combine([self] * int(n))

    def __rmul__(self, n):
        return self.scale(n)

    def __mul__(self, n):
        return self.scale(n)

    def merge(self, other):
        return _combine([self, other])

    def __add__(self, other):
        return self.merge(other)

    # -- sampling ------------------------------------------------------------

    def sample(self, tag, count, strategy=None, seed=None, weights=None):
        if tag not in self.mesh_pool:
            raise UnknownTag(f"unknown tag {tag!r}")
        kind = strategy or "uniform-vertex-subset"
        strat = ResampleStrategy(tag, kind, count, weights=weights, seed=seed)
        rng = np.random.default_rng(seed) if seed is not None else self._rng
        self._apply_strategy(strat, rng)

    def register_resampler(self, tag, kind="uniform-vertex-subset",
                           count=None, weights=None, seed=None):
        if tag not in self.mesh_pool:
            raise UnknownTag(f"unknown tag {tag!r}")
        count = count if count is not None else self.context[tag].shape[2]
        self.resamplers[tag] = ResampleStrategy(tag, kind, count,
                                                weights=weights, seed=seed)

    def apply_resamplers(self, rng=None):
        rng = rng or self._rng
        for tag in sorted(self.resamplers):
            self._apply_strategy(self.resamplers[tag], rng)

    def _apply_strategy(self, strat, rng):
        pool = self.mesh_pool[strat.tag]
        N = pool.shape[2]
        if strat.kind == "uniform-vertex-subset":
            if strat.count > N:
                raise CountExceedsPool(
                    f"requested {strat.count} of {N} pool points for "
                    f"{strat.tag!r}"
                )
            if strat.count == N:
                idx = np.arange(N)
            else:
                idx = np.sort(rng.choice(N, size=strat.count, replace=False))
        else:  # residual-weighted
            w = strat.weights
            if callable(w):
                w = w(self)
            if w is None:
                w = np.ones(N)
            w = np.asarray(w, dtype=np.float64).reshape(-1)
            if len(w) != N:
                raise BadShape(
                    f"weights length {len(w)} != pool size {N} for {strat.tag!r}"
                )
            p = np.abs(w)
            total = p.sum()
            p = np.full(N, 1.0 / N) if total <= 0 else p / total
            idx = rng.choice(N, size=strat.count, replace=True, p=p)
        sampled = pool[:, :, idx, :]
        self.context[strat.tag] = np.ascontiguousarray(
            np.broadcast_to(sampled,
                            (self.batch,) + sampled.shape[1:])
        )

    # -- geometry queries -----------------------------------------------------

    def normals(self, tag):
        """Outward unit normals at the tagged boundary vertices, (N_tag, D)."""
        if tag not in self.mesh.tags:
            raise UnknownTag(f"unknown tag {tag!r}")
        idx = self.mesh.tags[tag]
        boundary = set(self.connectivity.boundary_vertices.tolist())
        if len(idx) == 0 or not all(int(v) in boundary for v in idx):
            raise NotABoundaryTag(f"tag {tag!r} is not a boundary tag")
        return Tensor(self.connectivity.vertex_normals[idx])

    def total_measure(self):
        return float(self.connectivity.nodal_measure.sum())

    # -- fem hooks (implemented in jno.fem) ------------------------------------

    def init_fem(self, element_type="TRI3", quad_degree=2, bcs=()):
        from . import fem

        fem.init_fem(self, element_type=element_type,
                     quad_degree=quad_degree, bcs=bcs)
        return self

    def dirichlet(self, tags, value):
        from . import fem

        return fem.Dirichlet(tags, value)

    def neumann(self, tags):
        from . import fem

        return fem.Neumann(tags)

    def fem_symbols(self):
        from . import fem

        return fem.fem_symbols(self)


def _combine(parts):
    """Concatenate domains along the batch axis with aligned tags."""
    first = parts[0]
    for d in parts[1:]:
        if d.mesh is not first.mesh and (
            d.mesh.num_vertices != first.mesh.num_vertices
            or d.mesh.kind != first.mesh.kind
        ):
            raise TagMismatch("merged domains must share mesh topology")
        if d.num_times != first.num_times:
            raise TagMismatch("merged domains must share the time axis")
        if sorted(d.context) != sorted(first.context):
            raise TagMismatch("merged domains must carry the same tags")
        for tag in first.context:
            if d.context[tag].shape[1:] != first.context[tag].shape[1:]:
                raise TagMismatch(
                    f"context shapes differ for tag {tag!r}: "
                    f"{d.context[tag].shape} vs {first.context[tag].shape}"
                )
        if sorted(d.tensor_tags) != sorted(first.tensor_tags):
            raise TagMismatch("merged domains must carry the same tensor tags")

    out = Domain.__new__(Domain)
    out.mesh = first.mesh
    out.connectivity = first.connectivity
    out.batch = sum(d.batch for d in parts)
    out.time = first.time
    out.num_times = first.num_times
    out.time_grid = first.time_grid
    out.mesh_pool = dict(first.mesh_pool)
    out.context = {
        tag: np.ascontiguousarray(
            np.concatenate([d.context[tag] for d in parts], axis=0)
        )
        for tag in first.context
    }
    out.tensor_tags = {
        name: np.ascontiguousarray(
            np.concatenate([d.tensor_tags[name] for d in parts], axis=0)
        )
        for name in first.tensor_tags
    }
    out.resamplers = dict(first.resamplers)
    out._vars = {}
    for d in parts:
        out._vars.update(d._vars)
    out.fem = first.fem
    out._rng = np.random.default_rng(0)
    return out


# ---------------------------------------------------------------------------
# Constructors (the `jno.domain.rect(...)` surface)
# ---------------------------------------------------------------------------

def line(mesh_size=0.1, x_range=(0.0, 1.0), time=None):
    return Domain(meshmod.line_mesh(x_range, mesh_size), time=time)


def rect(mesh_size=0.1, x_range=(0.0, 1.0), y_range=(0.0, 1.0), time=None):
    return Domain(meshmod.rect_mesh(x_range, y_range, mesh_size), time=time)


def structured_rect(nx, ny, x_range=(0.0, 1.0), y_range=(0.0, 1.0), time=None):
    return Domain(meshmod.rect_mesh(x_range, y_range, None, nx=nx, ny=ny),
                  time=time)


def disk(mesh_size=0.1, radius=1.0, center=(0.0, 0.0), time=None):
    return Domain(meshmod.disk_mesh(radius, center, mesh_size), time=time)


def lshape(mesh_size=0.1, size=1.0, time=None):
    return Domain(meshmod.lshape_mesh(mesh_size, size), time=time)


def cube(mesh_size=0.25, x_range=(0.0, 1.0), y_range=(0.0, 1.0),
         z_range=(0.0, 1.0), time=None):
    return Domain(meshmod.cube_mesh(x_range, y_range, z_range, mesh_size),
                  time=time)


def rect_with_hole(mesh_size=0.1, x_range=(0.0, 1.0), y_range=(0.0, 1.0),
                   hole_center=(0.5, 0.5), hole_radius=0.2, time=None):
    return Domain(
        meshmod.rect_with_hole_mesh(x_range, y_range, hole_center,
                                    hole_radius, mesh_size),
        time=time,
    )


def load_mesh(path, time=None):
    """Load the native line-oriented mesh text format."""
    return Domain(meshmod.load_mesh_text(path), time=time)


def save_mesh(domain, path):
    meshmod.save_mesh_text(domain.mesh, path)
