"""Quadrature on cut volumes, cut faces and the embedded boundary.

Cut elements are subdivided into a uniform triangle lattice; inside each
sub-triangle the level set is interpolated linearly from its corner values
and the resulting chord splits the sub-triangle into an inside polygon
(fan-triangulated and covered with a mapped reference rule) and an interface
chord carrying a 1D rule.  Normals on the interface come from the analytic
level-set gradient, not from the chord, which removes the O(h) normal error.

Face rules locate the roots of the level set along the segment on a refined
lattice and polish them by bisection, then cover each inside sub-segment with
a Gauss rule.  On affine geometry the linear interpolation is exact, so all
rules integrate polynomials up to the base order exactly.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from cutdg.mesh import ElementClass

__all__ = [
    "gauss01",
    "triangle_rule01",
    "tensor_rule01",
    "clipped_triangle_rule",
    "triangle_interface_rule",
    "segment_rule",
    "boundary_orientation",
    "QuadratureSet",
]

_BISECT_ITERS = 50  # halves the bracket to ~1e-15 of the segment length


@lru_cache(maxsize=64)
def _gauss01_cached(n):
    x, w = np.polynomial.legendre.leggauss(int(n))
    out = (0.5 * (x + 1.0), 0.5 * w)
    out[0].setflags(write=False)
    out[1].setflags(write=False)
    return out


def gauss01(n):
    """Gauss-Legendre nodes and weights on [0, 1]."""
    return _gauss01_cached(int(n))


def _gauss_points_for_order(order):
    return max(1, -(-(int(order) + 1) // 2))


@lru_cache(maxsize=32)
def tensor_rule01(order):
    """Tensor Gauss rule on the unit square, exact to the given total degree."""
    n = _gauss_points_for_order(order)
    x, w = gauss01(n)
    xi, eta = np.meshgrid(x, x, indexing="ij")
    pts = np.stack([xi.ravel(), eta.ravel()], axis=-1)
    wts = np.outer(w, w).ravel()
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


@lru_cache(maxsize=32)
def triangle_rule01(order):
    """Collapsed (Duffy) rule on the reference triangle (0,0),(1,0),(0,1).

    The Duffy map raises the polynomial degree by one in the collapsed
    direction, hence the +2 safety in the point count.  Weights sum to 1/2.
    """
    n = max(1, -(-(int(order) + 2) // 2))
    x, w = gauss01(n)
    u, v = np.meshgrid(x, x, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    xi = u
    eta = v * (1.0 - u)
    wts = wu * wv * (1.0 - u)
    pts = np.stack([xi.ravel(), eta.ravel()], axis=-1)
    wts = wts.ravel()
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


def _map_to_triangles(tris, ref_pts, ref_w):
    """Map a reference triangle rule onto triangles of shape (m, 3, 2)."""
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    pts = (
        v0[:, None, :]
        + ref_pts[None, :, 0, None] * e1[:, None, :]
        + ref_pts[None, :, 1, None] * e2[:, None, :]
    )
    det = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    w = ref_w[None, :] * det[:, None]
    return pts, w


def _refine_triangles(tris, src, depth):
    """Uniform 4-way refinement, repeated ``depth`` times."""
    for _ in range(depth):
        v0, v1, v2 = tris[:, 0], tris[:, 1], tris[:, 2]
        m01 = 0.5 * (v0 + v1)
        m12 = 0.5 * (v1 + v2)
        m20 = 0.5 * (v2 + v0)
        tris = np.concatenate(
            [
                np.stack([v0, m01, m20], axis=1),
                np.stack([m01, v1, m12], axis=1),
                np.stack([m20, m12, v2], axis=1),
                np.stack([m01, m12, m20], axis=1),
            ]
        )
        src = np.concatenate([src, src, src, src])
    return tris, src


def _rotate_tris(tris, phi, shift):
    idx = (shift[:, None] + np.arange(3)[None, :]) % 3
    t = np.take_along_axis(tris, idx[:, :, None], axis=1)
    p = np.take_along_axis(phi, idx, axis=1)
    return t, p


def _edge_cut(a, b, fa, fb):
    t = fa / (fa - fb)
    return a + t[:, None] * (b - a)


def _clip_triangles(tris, phi):
    """Split sub-triangles by the linear interpolant of the level set.

    Returns the fully-inside triangles, the inside pieces of mixed triangles
    (fan-triangulated) and the interface chords, each with an index into the
    input array.  A corner value of exactly zero counts as outside.
    """
    neg = phi < 0.0
    nneg = neg.sum(axis=1)
    src = np.arange(len(tris))

    full = src[nneg == 3]

    pieces = [np.empty((0, 3, 2))]
    piece_src = [np.empty(0, dtype=np.int64)]
    chords = [np.empty((0, 2, 2))]
    chord_src = [np.empty(0, dtype=np.int64)]

    one = np.nonzero(nneg == 1)[0]
    if one.size:
        shift = np.argmax(neg[one], axis=1)
        t, p = _rotate_tris(tris[one], phi[one], shift)
        a, b, c = t[:, 0], t[:, 1], t[:, 2]
        pab = _edge_cut(a, b, p[:, 0], p[:, 1])
        pac = _edge_cut(a, c, p[:, 0], p[:, 2])
        pieces.append(np.stack([a, pab, pac], axis=1))
        piece_src.append(one)
        chords.append(np.stack([pab, pac], axis=1))
        chord_src.append(one)

    two = np.nonzero(nneg == 2)[0]
    if two.size:
        shift = np.argmax(~neg[two], axis=1)
        t, p = _rotate_tris(tris[two], phi[two], shift)
        a, b, c = t[:, 0], t[:, 1], t[:, 2]
        pab = _edge_cut(a, b, p[:, 0], p[:, 1])
        pac = _edge_cut(a, c, p[:, 0], p[:, 2])
        pieces.append(np.stack([pab, b, c], axis=1))
        pieces.append(np.stack([pab, c, pac], axis=1))
        piece_src.append(two)
        piece_src.append(two)
        chords.append(np.stack([pab, pac], axis=1))
        chord_src.append(two)

    return (
        full,
        np.concatenate(pieces),
        np.concatenate(piece_src),
        np.concatenate(chords),
        np.concatenate(chord_src),
    )


def _base_triangles(vertices):
    """Split element vertex arrays into triangles: quads give two, triangles one."""
    if vertices.shape[1] == 3:
        return vertices, np.arange(len(vertices))
    lower = vertices[:, [0, 1, 2]]
    upper = vertices[:, [0, 2, 3]]
    n = len(vertices)
    return np.concatenate([lower, upper]), np.concatenate([np.arange(n), np.arange(n)])


# Safety factor on the gradient-based Lipschitz bound used to certify
# sub-triangles as uncrossed; covers gradient variation at sub-cell scales.
_SUBDIV_SAFETY = 1.5


def _cut_element_geometry(vertices, ls, order, depth):
    """Volume pieces and interface chords for cut elements.

    ``vertices`` has shape (n_cut, 3 or 4, 2).  Returns flat quadrature
    arrays indexed into the input elements.  Refinement is adaptive: a
    sub-triangle whose corner values all clear a gradient-based Lipschitz
    margin cannot be crossed and stops refining (inside ones keep their
    coarse, exact rule; outside ones are dropped), so the interface is
    linearized at exactly the requested depth at a fraction of the points a
    uniform subdivision would need.
    """
    tris, src = _base_triangles(vertices)
    diam = np.linalg.norm(tris[:, 1] - tris[:, 0], axis=1).max() if len(tris) else 0.0

    full_parts, full_src_parts = [], []
    for level in range(depth):
        phi = ls.value(tris)
        grad = ls.gradient(tris)
        lip = np.linalg.norm(grad, axis=-1).max(axis=1)
        # Every interior point of a right isoceles sub-triangle lies within
        # half a diameter of its nearest vertex.
        margin = _SUBDIV_SAFETY * lip * (0.5 * diam / 2**level)
        certified = np.abs(phi).min(axis=1) > margin
        all_neg = (phi < 0.0).all(axis=1)
        all_pos = (phi >= 0.0).all(axis=1)
        done_inside = certified & all_neg
        refine = ~(certified & (all_neg | all_pos))
        if done_inside.any():
            full_parts.append(tris[done_inside])
            full_src_parts.append(src[done_inside])
        tris, src = _refine_triangles(tris[refine], src[refine], 1)

    phi = ls.value(tris)
    full, pieces, piece_src, chords, chord_src = _clip_triangles(tris, phi)

    ref_pts, ref_w = triangle_rule01(order)
    vol_tris = np.concatenate(full_parts + [tris[full], pieces])
    vol_src = np.concatenate(full_src_parts + [src[full], src[piece_src]])
    if len(vol_tris):
        pts, w = _map_to_triangles(vol_tris, ref_pts, ref_w)
        vol_x = pts.reshape(-1, 2)
        vol_w = w.ravel()
        vol_elem = np.repeat(vol_src, len(ref_w))
    else:
        vol_x = np.empty((0, 2))
        vol_w = np.empty(0)
        vol_elem = np.empty(0, dtype=np.int64)

    t1d, w1d = gauss01(_gauss_points_for_order(order))
    if len(chords):
        d = chords[:, 1] - chords[:, 0]
        length = np.linalg.norm(d, axis=1)
        keep = length > 0.0
        chords, d, length = chords[keep], d[keep], length[keep]
        csrc = src[chord_src[keep]]
        if_x = (chords[:, 0][:, None, :] + t1d[None, :, None] * d[:, None, :]).reshape(-1, 2)
        if_w = (w1d[None, :] * length[:, None]).ravel()
        if_elem = np.repeat(csrc, len(w1d))
        if_n = ls.unit_normal(if_x)
    else:
        if_x = np.empty((0, 2))
        if_w = np.empty(0)
        if_elem = np.empty(0, dtype=np.int64)
        if_n = np.empty((0, 2))

    return (vol_elem, vol_x, vol_w), (if_elem, if_x, if_w, if_n)


def clipped_triangle_rule(tri, ls, order, depth=0):
    """Rule on {phi < 0} inside a single triangle; returns (points, weights)."""
    tri = np.asarray(tri, dtype=float)[None]
    (elem, x, w), _ = _cut_element_geometry(tri, ls, order, depth)
    del elem
    return x, w


def triangle_interface_rule(tri, ls, order, depth=0):
    """Interface rule with normals for a single triangle."""
    tri = np.asarray(tri, dtype=float)[None]
    _, (elem, x, w, n) = _cut_element_geometry(tri, ls, order, depth)
    del elem
    return x, w, n


def _bisect_roots(p0, d, lo, hi, ls):
    """Bisection roots of phi along p(t) = p0 + t*d for bracket arrays."""
    flo = ls.value(p0 + lo[:, None] * d)
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        fm = ls.value(p0 + mid[:, None] * d)
        same = (fm < 0.0) == (flo < 0.0)
        lo = np.where(same, mid, lo)
        flo = np.where(same, fm, flo)
        hi = np.where(same, hi, mid)
    return 0.5 * (lo + hi)


def segment_rule(p0, p1, ls, order, depth=4):
    """Gauss rule on the {phi < 0} portion of the segment p0 -> p1.

    Sign changes are bracketed on a lattice of 2**depth subintervals and the
    roots polished by bisection before each inside sub-segment is covered.
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    d = p1 - p0
    m = 2**depth
    t = np.arange(m + 1) / m
    phi = ls.value(p0[None, :] + t[:, None] * d[None, :])
    neg = phi < 0.0
    change = neg[:-1] != neg[1:]
    roots = np.empty(0)
    if change.any():
        lo = t[:-1][change]
        hi = t[1:][change]
        roots = _bisect_roots(p0[None, :], d[None, :], lo, hi, ls)
    breaks = np.concatenate([[0.0], np.sort(roots), [1.0]])
    mids = 0.5 * (breaks[:-1] + breaks[1:])
    inside = ls.value(p0[None, :] + mids[:, None] * d[None, :]) < 0.0

    tg, wg = gauss01(_gauss_points_for_order(order))
    xs, ws = [], []
    seglen = np.linalg.norm(d)
    for k in np.nonzero(inside)[0]:
        a, b = breaks[k], breaks[k + 1]
        tt = a + tg * (b - a)
        xs.append(p0[None, :] + tt[:, None] * d[None, :])
        ws.append(wg * (b - a) * seglen)
    if not xs:
        return np.empty((0, 2)), np.empty(0)
    return np.concatenate(xs), np.concatenate(ws)


def _clipped_face_rules(active, ls, faces, order, depth):
    """Clipped rules for many faces at once; bisection runs batched."""
    p0 = active.face_p0[faces]
    d = active.face_p1[faces] - p0
    m = 2**depth
    tlat = np.arange(m + 1) / m
    phi = ls.value(p0[:, None, :] + tlat[None, :, None] * d[:, None, :])
    neg = phi < 0.0
    change = neg[:, :-1] != neg[:, 1:]
    fi, ki = np.nonzero(change)
    roots = np.empty(0)
    if fi.size:
        roots = _bisect_roots(p0[fi], d[fi], tlat[ki], tlat[ki + 1], ls)
    counts = np.bincount(fi, minlength=len(faces))

    a_parts, b_parts = [], []
    pos = 0
    for i in range(len(faces)):
        br = np.concatenate([[0.0], roots[pos : pos + counts[i]], [1.0]])
        a_parts.append(br[:-1])
        b_parts.append(br[1:])
        pos += counts[i]
    a = np.concatenate(a_parts)
    b = np.concatenate(b_parts)
    seg_face = np.repeat(np.arange(len(faces)), counts + 1)

    mids = 0.5 * (a + b)
    keep = ls.value(p0[seg_face] + mids[:, None] * d[seg_face]) < 0.0
    seg_face, a, b = seg_face[keep], a[keep], b[keep]
    if seg_face.size == 0:
        return np.empty(0, dtype=np.int64), np.empty((0, 2)), np.empty(0)

    tg, wg = gauss01(_gauss_points_for_order(order))
    tt = a[:, None] + tg[None, :] * (b - a)[:, None]
    pts = p0[seg_face][:, None, :] + tt[..., None] * d[seg_face][:, None, :]
    seglen = np.linalg.norm(d, axis=1)
    w = wg[None, :] * ((b - a) * seglen[seg_face])[:, None]
    ids = np.repeat(faces[seg_face], len(tg))
    return ids, pts.reshape(-1, 2), w.ravel()


def boundary_orientation(points, normals, b_field):
    """Pointwise sign of b . n: -1 inflow, +1 outflow, 0 characteristic."""
    b = b_field(np.asarray(points, dtype=float))
    bn = np.einsum("...k,...k->...", b, np.asarray(normals, dtype=float))
    return np.sign(bn).astype(np.int8)


@dataclass
class QuadratureSet:
    """Flat point/weight arrays for one active mesh and level set.

    ``vol_*`` covers T ∩ Ω for every active element (standard rules inside,
    clipped rules on cut elements).  ``if_*`` covers Γ ∩ T with unit normals
    pointing into {phi > 0}.  ``fph_*`` covers F ∩ Ω per interior face and
    ``ffu_*`` covers every interior face in full (used by the ghost penalties
    and the extension-based seminorms).
    """

    order: int
    depth: int
    vol_elem: np.ndarray
    vol_x: np.ndarray
    vol_w: np.ndarray
    if_elem: np.ndarray
    if_x: np.ndarray
    if_w: np.ndarray
    if_n: np.ndarray
    fph_face: np.ndarray
    fph_x: np.ndarray
    fph_w: np.ndarray
    ffu_face: np.ndarray
    ffu_x: np.ndarray
    ffu_w: np.ndarray

    @classmethod
    def build(cls, active, ls, order, depth):
        order = int(order)
        depth = int(depth)
        bg = active.bg

        # Volume rules: mapped standard rules inside, clipped rules on cuts.
        inside = np.nonzero(~active.is_cut)[0]
        cut = np.nonzero(active.is_cut)[0]
        parts_e, parts_x, parts_w = [], [], []
        if inside.size:
            if bg.kind == "quad":
                ref_pts, ref_w = tensor_rule01(order)
                origins = active.element_origin(inside)
                pts = origins[:, None, :] + ref_pts[None, :, :] * [bg.hx, bg.hy]
                w = np.broadcast_to(ref_w * bg.hx * bg.hy, (inside.size, ref_w.size))
                parts_e.append(np.repeat(inside, ref_w.size))
                parts_x.append(pts.reshape(-1, 2))
                parts_w.append(w.ravel())
            else:
                ref_pts, ref_w = triangle_rule01(order)
                verts = active.element_vertices(inside)
                pts, w = _map_to_triangles(verts, ref_pts, ref_w)
                parts_e.append(np.repeat(inside, ref_w.size))
                parts_x.append(pts.reshape(-1, 2))
                parts_w.append(w.ravel())
        if cut.size:
            verts = active.element_vertices(cut)
            (ve, vx, vw), (ie, ix, iw, inrm) = _cut_element_geometry(verts, ls, order, depth)
            parts_e.append(cut[ve])
            parts_x.append(vx)
            parts_w.append(vw)
            if_elem, if_x, if_w, if_n = cut[ie], ix, iw, inrm
        else:
            if_elem = np.empty(0, dtype=np.int64)
            if_x = np.empty((0, 2))
            if_w = np.empty(0)
            if_n = np.empty((0, 2))
        vol_elem = np.concatenate(parts_e) if parts_e else np.empty(0, dtype=np.int64)
        vol_x = np.concatenate(parts_x) if parts_x else np.empty((0, 2))
        vol_w = np.concatenate(parts_w) if parts_w else np.empty(0)

        # Full-face rules for every interior face.
        tg, wg = gauss01(_gauss_points_for_order(order))
        nf = active.n_faces
        if nf:
            d = active.face_p1 - active.face_p0
            length = np.linalg.norm(d, axis=1)
            ffu_x = (active.face_p0[:, None, :] + tg[None, :, None] * d[:, None, :]).reshape(-1, 2)
            ffu_w = (wg[None, :] * length[:, None]).ravel()
            ffu_face = np.repeat(np.arange(nf), len(tg))
        else:
            ffu_face = np.empty(0, dtype=np.int64)
            ffu_x = np.empty((0, 2))
            ffu_w = np.empty(0)

        # Physical (clipped) face rules: faces touching a cut element need
        # root finding, the rest reuse the full rule.
        fph_parts = []
        if nf:
            needs_clip = active.ghost
            plain = np.nonzero(~needs_clip)[0]
            if plain.size:
                sel = np.isin(ffu_face, plain)
                fph_parts.append((ffu_face[sel], ffu_x[sel], ffu_w[sel]))
            cut_faces = np.nonzero(needs_clip)[0]
            if cut_faces.size:
                ids, x, w = _clipped_face_rules(active, ls, cut_faces, order, max(depth, 2))
                if len(w):
                    fph_parts.append((ids, x, w))
        if fph_parts:
            fph_face = np.concatenate([p[0] for p in fph_parts])
            fph_x = np.concatenate([p[1] for p in fph_parts])
            fph_w = np.concatenate([p[2] for p in fph_parts])
        else:
            fph_face = np.empty(0, dtype=np.int64)
            fph_x = np.empty((0, 2))
            fph_w = np.empty(0)

        return cls(
            order=order,
            depth=depth,
            vol_elem=vol_elem,
            vol_x=vol_x,
            vol_w=vol_w,
            if_elem=if_elem,
            if_x=if_x,
            if_w=if_w,
            if_n=if_n,
            fph_face=fph_face,
            fph_x=fph_x,
            fph_w=fph_w,
            ffu_face=ffu_face,
            ffu_x=ffu_x,
            ffu_w=ffu_w,
        )

    def volume_sums(self, n_active):
        """Cut-volume weight sum per active element."""
        return np.bincount(self.vol_elem, weights=self.vol_w, minlength=n_active)

    def interface_sums(self, n_active):
        return np.bincount(self.if_elem, weights=self.if_w, minlength=n_active)


def volume_rule(active, local_ei, ls, order, depth):
    """Volume rule for one active element; OUTSIDE elements are rejected."""
    cls = active.classes[local_ei]
    if cls == ElementClass.OUTSIDE:
        raise ValueError("no volume rule for an OUTSIDE element")
    verts = active.element_vertices(np.array([local_ei]))
    if cls == ElementClass.INSIDE:
        if active.bg.kind == "quad":
            ref_pts, ref_w = tensor_rule01(order)
            o = active.element_origin(np.array([local_ei]))[0]
            pts = o[None, :] + ref_pts * [active.bg.hx, active.bg.hy]
            return pts, ref_w * active.bg.hx * active.bg.hy
        ref_pts, ref_w = triangle_rule01(order)
        pts, w = _map_to_triangles(verts, ref_pts, ref_w)
        return pts.reshape(-1, 2), w.ravel()
    (elem, x, w), _ = _cut_element_geometry(verts, ls, order, depth)
    del elem
    return x, w


def interface_rule(active, local_ei, ls, order, depth):
    """Interface rule for one cut element (empty if no sign change resolved)."""
    if active.classes[local_ei] != ElementClass.CUT:
        raise ValueError("interface rule requires a CUT element")
    verts = active.element_vertices(np.array([local_ei]))
    _, (elem, x, w, n) = _cut_element_geometry(verts, ls, order, depth)
    del elem
    return x, w, n
