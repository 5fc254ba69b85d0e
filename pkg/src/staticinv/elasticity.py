"""
Compressible Neo-Hookean elasticity on linear tetrahedra.

Energy density, with F the deformation gradient and J = det F::

    psi(F) = mu/2 (tr(F^T F) - 3) - mu ln J + lam/2 (ln J)^2

Elements whose deformation gradient has a singular value at or below the
inversion threshold (or det F <= 0) are evaluated on the clamped gradient
F_hat = U diag(max(sigma, threshold)) V^T built from a signed SVD, so energy
stays finite for inverted elements. Stress and tangent for those elements are
the exact derivatives of the clamped energy, computed in the rotated
diagonal frame. All other elements use the closed-form expressions.

All batched kernels work on arrays of shape (m, 3, 3); nodal quantities are
(n, 3) arrays or flat length-3n vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import ClusterMap, edge_matrices

__all__ = [
    "DEFAULT_POISSON",
    "DEFAULT_THRESHOLD",
    "MaterialModel",
    "ElementReference",
    "lame_from_young_poisson",
    "element_young_modulus",
    "element_reference",
    "deformation_gradients",
    "neo_hookean",
    "energy_density",
    "element_energies",
    "total_energy",
    "total_gradient",
    "element_forces",
    "element_hessians",
    "total_hessian",
    "project_psd",
]

DEFAULT_POISSON = 0.43
DEFAULT_THRESHOLD = 0.2


def lame_from_young_poisson(E, nu):
    """Convert Young's modulus and Poisson ratio to Lame parameters ``(mu, lam)``."""
    E = np.asarray(E, dtype=np.float64)
    if np.any(~(E > 0)):
        raise ValueError("Young's modulus must be positive")
    if not 0 <= nu < 0.5:
        raise ValueError(f"Poisson ratio must lie in [0, 0.5), got {nu}")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    if mu.ndim == 0:
        return float(mu), float(lam)
    return mu, lam


@dataclass(frozen=True, eq=False)
class MaterialModel:
    """Per-cluster Young's moduli blended onto elements, shared Poisson ratio."""

    cluster_E: np.ndarray
    cluster_map: ClusterMap
    poisson: float = DEFAULT_POISSON

    def __post_init__(self):
        E = np.array(self.cluster_E, dtype=np.float64).reshape(-1)
        if E.size != self.cluster_map.num_clusters:
            raise ValueError(f"{E.size} moduli for {self.cluster_map.num_clusters} clusters")
        if np.any(~(E > 0)):
            raise ValueError("cluster moduli must be positive")
        if not 0 < self.poisson < 0.5:
            raise ValueError(f"Poisson ratio must lie in (0, 0.5), got {self.poisson}")
        E.setflags(write=False)
        object.__setattr__(self, "cluster_E", E)

    @classmethod
    def homogeneous(cls, n_tets, E, poisson=DEFAULT_POISSON):
        return cls(np.array([E], dtype=np.float64), ClusterMap.homogeneous(n_tets), poisson)

    @property
    def num_clusters(self) -> int:
        return self.cluster_map.num_clusters

    def element_E(self) -> np.ndarray:
        return self.cluster_map.weights @ self.cluster_E

    def element_lame(self):
        return lame_from_young_poisson(self.element_E(), self.poisson)

    def with_E(self, cluster_E) -> "MaterialModel":
        return MaterialModel(cluster_E, self.cluster_map, self.poisson)


def element_young_modulus(material: MaterialModel, e: int) -> float:
    """Blended Young's modulus of one element."""
    return float(material.cluster_map.weights[e] @ material.cluster_E)


@dataclass(frozen=True, eq=False)
class ElementReference:
    """Rest-shape precomputation: inverse edge matrices and signed rest volumes."""

    inv_rest_shape: np.ndarray
    rest_volume: np.ndarray


def element_reference(X, tets) -> ElementReference:
    Dm = edge_matrices(X, tets)
    return ElementReference(np.linalg.inv(Dm), np.linalg.det(Dm) / 6.0)


def deformation_gradients(x, tets, ref: ElementReference) -> np.ndarray:
    return edge_matrices(x, tets) @ ref.inv_rest_shape


# ---------------------------------------------------------------------------
# constitutive kernels

def _closed_form(F, mu, lam, want_stress, want_tangent):
    J = np.linalg.det(F)
    logJ = np.log(J)
    psi = 0.5 * mu * (np.einsum("eij,eij->e", F, F) - 3.0) - mu * logJ + 0.5 * lam * logJ**2
    P = A = None
    if want_stress or want_tangent:
        Finv = np.linalg.inv(F)
        FinvT = Finv.transpose(0, 2, 1)
        c = lam * logJ
        P = mu[:, None, None] * (F - FinvT) + c[:, None, None] * FinvT
        if want_tangent:
            eye = np.eye(3)
            A = (mu[:, None, None, None, None] * np.einsum("ik,jl->ijkl", eye, eye)[None]
                 + (mu - c)[:, None, None, None, None] * np.einsum("ejk,eli->eijkl", Finv, Finv)
                 + lam[:, None, None, None, None] * np.einsum("eji,elk->eijkl", Finv, Finv))
    return psi, P, A


def _signed_svd(F):
    U, s, Vt = np.linalg.svd(F)
    fu = np.linalg.det(U) < 0
    U[fu, :, 2] *= -1.0
    s[fu, 2] *= -1.0
    fv = np.linalg.det(Vt) < 0
    Vt[fv, 2, :] *= -1.0
    s[fv, 2] *= -1.0
    return U, s, Vt


def _clamped(F, mu, lam, threshold, want_stress, want_tangent):
    U, s, Vt = _signed_svd(F)
    sh = np.maximum(s, threshold)
    act = s > threshold
    logJ = np.log(sh).sum(axis=1)
    psi = 0.5 * mu * ((sh**2).sum(axis=1) - 3.0) - mu * logJ + 0.5 * lam * logJ**2
    P = A = None
    if not (want_stress or want_tangent):
        return psi, P, A
    m_, l_, L = mu[:, None], lam[:, None], logJ[:, None]
    dpsi = np.where(act, m_ * sh - m_ / sh + l_ * L / sh, 0.0)
    P = np.einsum("eia,ea,eaj->eij", U, dpsi, Vt)
    if not want_tangent:
        return psi, P, A
    inv = 1.0 / sh
    hess = lam[:, None, None] * inv[:, :, None] * inv[:, None, :]
    diag = m_ + (m_ - l_ * L) * inv**2
    hess[:, [0, 1, 2], [0, 1, 2]] += diag
    hess *= act[:, :, None] & act[:, None, :]
    Ahat = np.zeros(F.shape[:1] + (3, 3, 3, 3))
    for a in range(3):
        for c in range(3):
            Ahat[:, a, a, c, c] = hess[:, a, c]
    for a, b in ((0, 1), (0, 2), (1, 2)):
        ds = s[:, a] - s[:, b]
        near = np.abs(ds) < 1e-7
        twist = np.where(near, hess[:, a, a] - hess[:, a, b],
                         (dpsi[:, a] - dpsi[:, b]) / np.where(near, 1.0, ds))
        ss = s[:, a] + s[:, b]
        ss = np.where(np.abs(ss) < 1e-12, np.copysign(1e-12, ss), ss)
        flip = (dpsi[:, a] + dpsi[:, b]) / ss
        alpha, beta = 0.5 * (twist + flip), 0.5 * (twist - flip)
        Ahat[:, a, b, a, b] = Ahat[:, b, a, b, a] = alpha
        Ahat[:, a, b, b, a] = Ahat[:, b, a, a, b] = beta
    A = np.einsum("eia,ejb,eabcd,ekc,eld->eijkl", U, Vt.transpose(0, 2, 1), Ahat, U,
                  Vt.transpose(0, 2, 1), optimize=True)
    return psi, P, A


def neo_hookean(F, mu, lam, threshold=DEFAULT_THRESHOLD, want_stress=True, want_tangent=False):
    """Batched energy density, first Piola stress and tangent ``dP/dF``.

    Parameters
    ----------
    F : ndarray, shape (m, 3, 3)
    mu, lam : ndarray, shape (m,)
    threshold : float
        Lower clamp on signed singular values.

    Returns
    -------
    psi : ndarray (m,)
    P : ndarray (m, 3, 3) or None
    A : ndarray (m, 3, 3, 3, 3) or None
        ``A[e, i, j, k, l] = dP_ij / dF_kl``.
    clamped : ndarray of bool (m,)
    """
    F = np.asarray(F, dtype=np.float64)
    m = F.shape[0]
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), (m,))
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (m,))
    smin = np.linalg.svd(F, compute_uv=False)[:, -1] if m else np.zeros(0)
    clamped = (np.linalg.det(F) <= 0) | (smin <= threshold)
    psi = np.empty(m)
    P = np.empty((m, 3, 3)) if (want_stress or want_tangent) else None
    A = np.empty((m, 3, 3, 3, 3)) if want_tangent else None
    for mask, kernel in ((~clamped, _closed_form), (clamped, None)):
        if not mask.any():
            continue
        if kernel is None:
            r = _clamped(F[mask], mu[mask], lam[mask], threshold, want_stress, want_tangent)
        else:
            r = kernel(F[mask], mu[mask], lam[mask], want_stress, want_tangent)
        psi[mask] = r[0]
        if P is not None:
            P[mask] = r[1]
        if A is not None:
            A[mask] = r[2]
    return psi, P, A, clamped


def energy_density(F, mu, lam, threshold=DEFAULT_THRESHOLD) -> float:
    """Neo-Hookean energy density of a single deformation gradient."""
    psi, _, _, _ = neo_hookean(np.asarray(F, dtype=np.float64)[None], mu, lam, threshold,
                               want_stress=False)
    return float(psi[0])


# ---------------------------------------------------------------------------
# element and global quantities

def _expand_inverse(Dm_inv):
    # rows: gradient of the four barycentric shape functions
    return np.concatenate([-Dm_inv.sum(axis=1, keepdims=True), Dm_inv], axis=1)


def _prepare(X, x, tets, material, threshold, want_stress, want_tangent, ref=None):
    ref = element_reference(X, tets) if ref is None else ref
    F = deformation_gradients(x, tets, ref)
    mu, lam = material.element_lame()
    psi, P, A, clamped = neo_hookean(F, mu, lam, threshold, want_stress, want_tangent)
    return ref, F, psi, P, A


def element_energies(X, x, tets, material, threshold=DEFAULT_THRESHOLD):
    ref, _, psi, _, _ = _prepare(X, x, tets, material, threshold, False, False)
    return ref.rest_volume * psi


def total_energy(X, x, tets, material: MaterialModel, threshold=DEFAULT_THRESHOLD) -> float:
    """Elastic energy: rest-volume-weighted sum of element energy densities."""
    return float(element_energies(X, x, tets, material, threshold).sum())


def element_forces(X, x, tets, material, threshold=DEFAULT_THRESHOLD):
    """Per-element energy gradients with respect to the four vertices, shape (m, 4, 3)."""
    ref, _, _, P, _ = _prepare(X, x, tets, material, threshold, True, False)
    G = _expand_inverse(ref.inv_rest_shape)
    return ref.rest_volume[:, None, None] * np.einsum("ekj,eaj->eak", P, G)


def scatter_nodes(values, tets, n_nodes):
    """Sum per-element vertex values (m, 4, 3) into a flat length-3n vector."""
    idx = (3 * tets[:, :, None] + np.arange(3)).ravel()
    return np.bincount(idx, weights=values.ravel(), minlength=3 * n_nodes)


def total_gradient(X, x, tets, material: MaterialModel, threshold=DEFAULT_THRESHOLD) -> np.ndarray:
    """Gradient of :func:`total_energy` with respect to the deformed positions, flat length 3n."""
    n = np.asarray(x).reshape(-1, 3).shape[0]
    return scatter_nodes(element_forces(X, x, tets, material, threshold), tets, n)


def element_hessians(X, x, tets, material, threshold=DEFAULT_THRESHOLD):
    """12x12 element stiffness blocks, dof order (vertex, axis)."""
    ref, _, _, _, A = _prepare(X, x, tets, material, threshold, False, True)
    G = _expand_inverse(ref.inv_rest_shape)
    K = np.einsum("ekjlq,eaj,ebq->eakbl", A, G, G, optimize=True)
    K *= ref.rest_volume[:, None, None, None, None]
    K = K.reshape(-1, 12, 12)
    return 0.5 * (K + K.transpose(0, 2, 1))


def project_psd(K, rel_tol=1e-10):
    """Clamp negative eigenvalues of each block to zero.

    Blocks whose smallest eigenvalue is above ``-rel_tol * max|eig|`` are
    returned untouched. Returns the projected stack and the number of blocks
    changed.
    """
    w, V = np.linalg.eigh(K)
    scale = np.abs(w).max(axis=1)
    bad = w[:, 0] < -rel_tol * scale
    if not bad.any():
        return K, 0
    K = K.copy()
    wb = np.maximum(w[bad], 0.0)
    K[bad] = np.einsum("eij,ej,ekj->eik", V[bad], wb, V[bad])
    return K, int(bad.sum())


def assemble(blocks, tets, n_nodes) -> sp.csr_matrix:
    """Assemble 12x12 element blocks into a sparse 3n x 3n matrix (fixed element order)."""
    dof = (3 * tets[:, :, None] + np.arange(3)).reshape(-1, 12)
    rows = np.repeat(dof, 12, axis=1).ravel()
    cols = np.tile(dof, (1, 12)).ravel()
    N = 3 * n_nodes
    return sp.csr_matrix((blocks.ravel(), (rows, cols)), shape=(N, N))


def total_hessian(X, x, tets, material: MaterialModel, threshold=DEFAULT_THRESHOLD) -> sp.csr_matrix:
    """Exact second derivative of :func:`total_energy` in the deformed positions."""
    n = np.asarray(x).reshape(-1, 3).shape[0]
    return assemble(element_hessians(X, x, tets, material, threshold), tets, n)


# ---------------------------------------------------------------------------
# derivatives used by the adjoint gradients

def element_force_products(X, x, lam_vec, tets, material, threshold=DEFAULT_THRESHOLD):
    """``lam_e . dW_e/dx_e`` for each element (length m)."""
    f = element_forces(X, x, tets, material, threshold)
    lam_e = np.asarray(lam_vec).reshape(-1, 3)[tets]
    return np.einsum("eak,eak->e", f, lam_e)


def rest_derivative_of_force_product(X, x, lam_vec, tets, material, threshold=DEFAULT_THRESHOLD):
    """Gradient over rest positions of ``lam . grad_x W(X, x)``, flat length 3n.

    Only the product is formed; the mixed second derivative is never built.
    """
    X = np.asarray(X).reshape(-1, 3)
    ref, F, _, P, A = _prepare(X, x, tets, material, threshold, True, True)
    H = ref.inv_rest_shape
    V = ref.rest_volume
    Dl = edge_matrices(lam_vec, tets)
    Gd = Dl @ H
    PG = np.einsum("eij,eij->e", P, Gd)
    AG = np.einsum("eijkl,ekl->eij", A, Gd)
    HT = H.transpose(0, 2, 1)
    FT = F.transpose(0, 2, 1)
    dDm = (PG[:, None, None] * HT
           - FT @ AG @ HT
           - Gd.transpose(0, 2, 1) @ P @ HT) * V[:, None, None]
    return scatter_edge_gradient(dDm, tets, X.shape[0])


def scatter_edge_gradient(dDm, tets, n_nodes):
    """Map gradients with respect to edge matrices (m, 3, 3) onto nodes, flat length 3n."""
    cols = dDm.transpose(0, 2, 1)  # column j -> vertex j+1
    per_vertex = np.concatenate([-cols.sum(axis=1, keepdims=True), cols], axis=1)
    return scatter_nodes(per_vertex, tets, n_nodes)
