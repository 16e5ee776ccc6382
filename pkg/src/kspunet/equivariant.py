"""Cyclic-group steerable convolution kernels and layers.

Kernels are solved on a polar grid whose angular resolution is a multiple of
the group order, so rotating by a group element is an exact cyclic shift of
the angular index. The constraint ``k(g x) = rho_out(g) k(x) rho_in(g)^-1`` is
stacked over every group element and grid point and its null space is taken
from an SVD. The solved kernels are then resampled once onto the square pixel
grid used by the convolution.

Coordinates: kernel pixel ``(row u, col v)`` sits at the point
``(v - c, c - u)`` (x to the right, y up), which makes ``torch.rot90`` with
``k=1`` on the spatial axes the rotation by +90 degrees.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.ndimage
import torch
from torch import nn

from .errors import ShapeMismatch

ANGLES_PER_ELEMENT = 4
NULL_TOL = 1e-9
SUPERSAMPLE = 8
CACHE_MAGIC = b"KSPB"
CACHE_VERSION = 1


@dataclass(frozen=True)
class Irrep:
    """Real irreducible representation of the cyclic group C_N with frequency n."""

    group_order: int
    frequency: int

    def __post_init__(self):
        if not 0 <= self.frequency <= self.group_order // 2:
            raise ValueError(f"frequency {self.frequency} outside 0..{self.group_order // 2}")

    @property
    def is_trivial(self) -> bool:
        return self.frequency == 0

    @property
    def dim(self) -> int:
        if self.frequency == 0 or 2 * self.frequency == self.group_order:
            return 1
        return 2

    def matrix(self, j: int) -> np.ndarray:
        if self.frequency == 0:
            return np.ones((1, 1))
        if self.dim == 1:
            return np.array([[(-1.0) ** j]])
        t = 2 * np.pi * self.frequency * j / self.group_order
        c, s = np.cos(t), np.sin(t)
        return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class FieldType:
    """Direct sum of irreps; channel layout follows the field order."""

    irreps: tuple[Irrep, ...]

    @classmethod
    def build(cls, group_order: int, counts: dict[int, int]) -> FieldType:
        """``counts`` maps frequency to multiplicity, e.g. ``{0: 4, 1: 4}``."""
        irreps = []
        for freq in sorted(counts):
            irreps.extend([Irrep(group_order, freq)] * counts[freq])
        return cls(tuple(irreps))

    @property
    def group_order(self) -> int:
        return self.irreps[0].group_order

    @property
    def total_dim(self) -> int:
        return sum(r.dim for r in self.irreps)

    def slices(self) -> list[slice]:
        out, start = [], 0
        for r in self.irreps:
            out.append(slice(start, start + r.dim))
            start += r.dim
        return out


def representation_matrix(ft: FieldType | Irrep, j: int) -> np.ndarray:
    """Block-diagonal representation of group element ``j`` (rotation by 2*pi*j/N)."""
    irreps = (ft,) if isinstance(ft, Irrep) else ft.irreps
    n = irreps[0].group_order
    if not 0 <= j < n:
        raise ValueError(f"group element {j} outside 0..{n - 1}")
    return scipy_block_diag([r.matrix(j) for r in irreps])


def scipy_block_diag(blocks: list[np.ndarray]) -> np.ndarray:
    size = sum(b.shape[0] for b in blocks)
    out = np.zeros((size, size))
    i = 0
    for b in blocks:
        out[i : i + b.shape[0], i : i + b.shape[0]] = b
        i += b.shape[0]
    return out


@dataclass(frozen=True, eq=False)
class SteerableBasis:
    """Orthonormal steerable kernels for one (rho_in, rho_out) pair.

    ``polar`` has shape ``(dim, c_out, c_in, n_rings, n_angles)``; ``cartesian``
    has shape ``(dim, c_out, c_in, size, size)``.
    """

    polar: np.ndarray
    cartesian: np.ndarray
    rho_in: Irrep
    rho_out: Irrep
    size: int
    group_order: int

    @property
    def dim(self) -> int:
        return self.polar.shape[0]

    @property
    def n_angles(self) -> int:
        return self.polar.shape[-1]


def _polar_constraint_system(rho_in: Irrep, rho_out: Irrep, n_rings: int, n_angles: int, n: int) -> np.ndarray:
    co, ci = rho_out.dim, rho_in.dim
    blk = co * ci
    n_unknowns = blk * n_rings * n_angles
    shift = n_angles // n

    def col(r, a):
        # unknowns ordered (c_out, c_in, ring, angle); returns the columns of one (co, ci) block
        base = np.arange(blk).reshape(co, ci) * (n_rings * n_angles)
        return (base + r * n_angles + a).ravel()

    rows = []
    for j in range(n):
        # vec(A X B) = (A kron B^T) vec(X) for row-major vec
        action = np.kron(rho_out.matrix(j), rho_in.matrix(j))  # rho_in orthogonal: inverse^T = itself
        for r in range(n_rings):
            for a in range(n_angles):
                m = np.zeros((blk, n_unknowns))
                m[:, col(r, (a + j * shift) % n_angles)] += np.eye(blk)
                m[:, col(r, a)] -= action
                rows.append(m)
    # the centre ring is a single point: every angular sample must agree
    for a in range(1, n_angles):
        m = np.zeros((blk, n_unknowns))
        m[:, col(0, a)] += np.eye(blk)
        m[:, col(0, 0)] -= np.eye(blk)
        rows.append(m)
    return np.concatenate(rows, axis=0)


def _null_space(system: np.ndarray) -> np.ndarray:
    _, s, vt = np.linalg.svd(system, full_matrices=False)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > NULL_TOL * smax)) if smax > 0 else 0
    return vt[rank:]


@lru_cache(maxsize=32)
def _resampling_matrix(size: int, n_angles: int) -> np.ndarray:
    """Area weights ``W[pixel, ring * n_angles + angle]`` mapping polar samples to pixels.

    Each pixel is supersampled; every sub-point inside the disk of radius
    size/2 is assigned to its nearest ring and angular bin. The weights are
    then averaged over the four right-angle rotations so the map commutes
    exactly with 90 degree turns.
    """
    c = size // 2
    n_rings = c + 1
    q = SUPERSAMPLE
    offs = (np.arange(q) + 0.5) / q - 0.5
    w = np.zeros((size * size, n_rings * n_angles))
    for u in range(size):
        for v in range(size):
            xs = (v - c) + offs[None, :].repeat(q, 0)
            ys = (c - u) - offs[:, None].repeat(q, 1)
            r = np.hypot(xs, ys).ravel()
            th = np.arctan2(ys, xs).ravel()
            inside = r < size / 2.0
            ring = np.floor(r[inside] + 0.5).astype(int)
            ang = np.round(th[inside] / (2 * np.pi / n_angles)).astype(int) % n_angles
            np.add.at(w[u * size + v], ring * n_angles + ang, 1.0 / (q * q))
    quarter = n_angles // 4
    sym = np.zeros_like(w)
    pix = np.arange(size * size).reshape(size, size)
    cells = np.arange(n_rings * n_angles).reshape(n_rings, n_angles)
    for t in range(4):
        pix_t = np.rot90(pix, -t)  # pix_t[u, v] = index of the pixel g^t (u, v)
        cells_t = np.roll(cells, -t * quarter, axis=1)  # cells_t[r, a] = cell (r, a + t*quarter)
        sym += w[pix_t.ravel()][:, cells_t.ravel()]
    sym /= 4.0
    sym.setflags(write=False)
    return sym


def solve_kernel_basis(rho_in: Irrep, rho_out: Irrep, size: int, group_order: int | None = None,
                       cache_dir: str | Path | None = None) -> SteerableBasis:
    """Solve the steering constraint for one pair of irreps.

    An empty null space is a valid outcome and yields a basis with ``dim == 0``.
    With ``cache_dir`` the result is read from / written to a binary cache file.
    """
    n = group_order or rho_in.group_order
    if rho_in.group_order != n or rho_out.group_order != n:
        raise ValueError("irreps must belong to the requested cyclic group")
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    if cache_dir is not None:
        path = Path(cache_dir) / _cache_name(rho_in, rho_out, size, n)
        if path.exists():
            return load_basis(path)
    basis = _solve(rho_in.frequency, rho_out.frequency, size, n)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_basis(basis, path)
    return basis


@lru_cache(maxsize=256)
def _solve(freq_in: int, freq_out: int, size: int, n: int) -> SteerableBasis:
    rho_in, rho_out = Irrep(n, freq_in), Irrep(n, freq_out)
    n_rings = size // 2 + 1
    n_angles = ANGLES_PER_ELEMENT * n
    system = _polar_constraint_system(rho_in, rho_out, n_rings, n_angles, n)
    null = _null_space(system)
    polar = null.reshape(-1, rho_out.dim, rho_in.dim, n_rings, n_angles)
    w = _resampling_matrix(size, n_angles)
    flat = polar.reshape(polar.shape[0], rho_out.dim, rho_in.dim, n_rings * n_angles)
    cart = np.einsum("docp,sp->docs", flat, w).reshape(polar.shape[0], rho_out.dim, rho_in.dim, size, size)
    polar.setflags(write=False)
    cart.setflags(write=False)
    return SteerableBasis(polar, cart, rho_in, rho_out, size, n)


def constraint_residual(basis: SteerableBasis) -> float:
    """Largest violation of the steering constraint over all group elements and grid points."""
    if basis.dim == 0:
        return 0.0
    shift = basis.n_angles // basis.group_order
    worst = 0.0
    for j in range(basis.group_order):
        ro, ri = basis.rho_out.matrix(j), basis.rho_in.matrix(j)
        rotated = np.roll(basis.polar, -j * shift, axis=-1)  # k(g x) at every (ring, angle)
        steered = np.einsum("ab,dbcrt,ce->daert", ro, basis.polar, ri.T)
        worst = max(worst, float(np.abs(rotated - steered).max()))
    return worst


# ---------------------------------------------------------------------------
# basis cache file: magic, u32 version, u64 header length, JSON header, f8 data


def _cache_name(rho_in: Irrep, rho_out: Irrep, size: int, n: int) -> str:
    return f"basis_C{n}_in{rho_in.frequency}_out{rho_out.frequency}_s{size}.bin"


def save_basis(basis: SteerableBasis, path: str | Path) -> None:
    header = json.dumps(
        {
            "key": {"rho_in": basis.rho_in.frequency, "rho_out": basis.rho_out.frequency,
                    "size": basis.size, "group_order": basis.group_order},
            "polar_shape": list(basis.polar.shape),
            "cartesian_shape": list(basis.cartesian.shape),
        },
        sort_keys=True,
    ).encode()
    payload = basis.polar.astype("<f8").tobytes() + basis.cartesian.astype("<f8").tobytes()
    tmp = Path(path).with_suffix(".tmp")
    tmp.write_bytes(CACHE_MAGIC + struct.pack("<IQ", CACHE_VERSION, len(header)) + header + payload)
    tmp.replace(path)


def load_basis(path: str | Path) -> SteerableBasis:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a basis cache file")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported basis cache version {version}")
    header = json.loads(raw[16 : 16 + hlen])
    key = header["key"]
    data = np.frombuffer(raw[16 + hlen :], dtype="<f8")
    n_polar = math.prod(header["polar_shape"])
    polar = data[:n_polar].reshape(header["polar_shape"]).astype(np.float64)
    cart = data[n_polar:].reshape(header["cartesian_shape"]).astype(np.float64)
    n = key["group_order"]
    return SteerableBasis(polar, cart, Irrep(n, key["rho_in"]), Irrep(n, key["rho_out"]), key["size"], n)


# ---------------------------------------------------------------------------
# layers


def steerable_conv_forward(x: torch.Tensor, basis: SteerableBasis, weights: torch.Tensor) -> torch.Tensor:
    """Convolve one input field with the kernel ``sum_j weights[j] * basis_j``."""
    if weights.shape != (basis.dim,):
        raise ShapeMismatch(f"expected {basis.dim} weights, got {tuple(weights.shape)}")
    if x.ndim != 4 or x.shape[1] != basis.rho_in.dim or x.shape[-1] != x.shape[-2]:
        raise ShapeMismatch(f"input of shape {tuple(x.shape)} does not match field dim {basis.rho_in.dim}")
    cart = torch.tensor(basis.cartesian, dtype=weights.dtype)
    kernel = torch.einsum("d,doixy->oixy", weights, cart)
    return torch.nn.functional.conv2d(x, kernel, padding=basis.size // 2)


@lru_cache(maxsize=64)
def _expansion(in_type: FieldType, out_type: FieldType, size: int) -> np.ndarray:
    """Dense map from the layer's weight vector to its flattened Cartesian kernel."""
    cin, cout = in_type.total_dim, out_type.total_dim
    cols = []
    for so, ro in zip(out_type.slices(), out_type.irreps):
        for si, ri in zip(in_type.slices(), in_type.irreps):
            b = _solve(ri.frequency, ro.frequency, size, ro.group_order)
            for k in b.cartesian:
                full = np.zeros((cout, cin, size, size))
                full[so, si] = k
                cols.append(full.ravel())
    if not cols:
        return np.zeros((0, cout * cin * size * size))
    e = np.stack(cols)
    e.setflags(write=False)
    return e


class SteerableConv2d(nn.Module):
    """Convolution between typed feature fields with a steerable kernel.

    Biases are only attached to trivial output fields; anything else would
    break equivariance.
    """

    def __init__(self, in_type: FieldType, out_type: FieldType, size: int = 3,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.in_type, self.out_type, self.size = in_type, out_type, size
        e = _expansion(in_type, out_type, size)
        self.register_buffer("expansion", torch.tensor(e, dtype=torch.get_default_dtype()), persistent=False)
        # He-style scale from the expected fan-in energy of a unit-variance weight draw
        per_out = (e.reshape(e.shape[0], out_type.total_dim, -1) ** 2).sum(axis=(0, 2))
        scale = math.sqrt(2.0 / max(per_out.mean(), 1e-12))
        w = torch.randn(e.shape[0], generator=generator, dtype=torch.float64) * scale
        self.weight = nn.Parameter(w.to(torch.get_default_dtype()))
        trivial = [s.start for s, r in zip(out_type.slices(), out_type.irreps) if r.is_trivial]
        self.register_buffer("bias_index", torch.tensor(trivial, dtype=torch.long), persistent=False)
        self.bias = nn.Parameter(torch.zeros(len(trivial)))

    def kernel(self) -> torch.Tensor:
        k = self.weight @ self.expansion.to(self.weight.dtype)
        return k.reshape(self.out_type.total_dim, self.in_type.total_dim, self.size, self.size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_type.total_dim:
            raise ShapeMismatch(f"expected {self.in_type.total_dim} channels, got {tuple(x.shape)}")
        bias = torch.zeros(self.out_type.total_dim, dtype=x.dtype).index_put((self.bias_index,), self.bias)
        return torch.nn.functional.conv2d(x, self.kernel(), bias=bias, padding=self.size // 2)


def _field_norms(x: torch.Tensor, ft: FieldType, eps: float) -> list[torch.Tensor]:
    return [torch.sqrt((x[:, s] ** 2).sum(dim=1, keepdim=True) + eps) for s in ft.slices()]


class NormNonlinearity(nn.Module):
    """ReLU on trivial fields; every other field is scaled by sigmoid(|f| + b)."""

    def __init__(self, ft: FieldType, eps: float = 1e-12):
        super().__init__()
        self.ft, self.eps = ft, eps
        n_gated = sum(1 for r in ft.irreps if not r.is_trivial)
        self.bias = nn.Parameter(torch.zeros(n_gated))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        parts, g = [], 0
        for s, r in zip(self.ft.slices(), self.ft.irreps):
            f = x[:, s]
            if r.is_trivial:
                parts.append(torch.relu(f))
            else:
                norm = torch.sqrt((f**2).sum(dim=1, keepdim=True) + self.eps)
                parts.append(f * torch.sigmoid(norm + self.bias[g]))
                g += 1
        return torch.cat(parts, dim=1)


def invariant_pool(x: torch.Tensor, ft: FieldType, eps: float = 1e-12) -> torch.Tensor:
    """One rotation-invariant scalar per field: spatial mean of the value (trivial) or of the norm."""
    out = []
    for s, r in zip(ft.slices(), ft.irreps):
        f = x[:, s]
        if r.is_trivial:
            out.append(f.mean(dim=(1, 2, 3)))
        else:
            out.append(torch.sqrt((f**2).sum(dim=1) + eps).mean(dim=(1, 2)))
    return torch.stack(out, dim=1)


def rotate_field(x: torch.Tensor, ft: FieldType, j: int, order: int = 3) -> torch.Tensor:
    """Group action on a typed feature map: ``rho(g) f(g^-1 x)`` for rotation by 2*pi*j/N.

    Right-angle rotations are exact grid permutations; other angles are
    interpolated with a spline of the given order.
    """
    n = ft.group_order
    rho = torch.as_tensor(representation_matrix(ft, j % n), dtype=x.dtype)
    if (4 * j) % n == 0:
        moved = torch.rot90(x, (4 * j) // n, dims=(-2, -1))
    else:
        deg = 360.0 * j / n
        arr = x.detach().cpu().numpy()
        moved = torch.as_tensor(
            scipy.ndimage.rotate(arr, deg, axes=(-1, -2), reshape=False, order=order, mode="constant"),
            dtype=x.dtype,
        )
    return torch.einsum("ab,nbhw->nahw", rho, moved)
