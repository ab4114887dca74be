"""Rigid-transform arithmetic on SE(3) and its Lie algebra se(3).

Conventions used across the whole package:
  - A pose is (unit quaternion, translation). Quaternions are (w, x, y, z),
    Hamilton convention, canonicalized to w >= 0. Translations in meters.
  - A twist is a 6-vector [rho; phi]: translational part first (meters),
    rotational part second (radians). Every 6x6 matrix (information,
    adjoint, Jacobian blocks) follows the same ordering.
  - Wire/file serialization of a pose is 7 numbers [tx, ty, tz, qw, qx, qy, qz].

exp/log switch to a 2nd-order Taylor branch below angle 1e-8 to avoid 0/0;
log raises AngleNearPi within 1e-6 of the principal-branch boundary instead
of picking an arbitrary axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8
PI_MARGIN = 1e-6

# Cancellation in the trig coefficient ratios of the Jacobian closed forms
# dominates below ~0.1 rad; the series branch is exact to ~1e-12 there.
_SERIES_ANGLE = 1e-1


class AngleNearPi(ValueError):
    """Rotation angle within PI_MARGIN of pi: log has no principal value."""


class DegenerateGeometry(ValueError):
    """Point set too degenerate (rank < 2) for rigid alignment."""


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


# ---------------------------------------------------------------------------
# quaternion helpers (private; poses are the public rotation representation)
# ---------------------------------------------------------------------------


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    # R(q) v = v + w t + u x t with t = 2 u x v, u = vector part; the cross
    # products are unrolled because np.cross dominates solver profiles
    w, ux, uy, uz = q
    vx, vy, vz = v
    tx = 2.0 * (uy * vz - uz * vy)
    ty = 2.0 * (uz * vx - ux * vz)
    tz = 2.0 * (ux * vy - uy * vx)
    return np.array(
        [
            vx + w * tx + uy * tz - uz * ty,
            vy + w * ty + uz * tx - ux * tz,
            vz + w * tz + ux * ty - uy * tx,
        ]
    )


def _quat_to_mat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _mat_to_quat(R: np.ndarray) -> np.ndarray:
    # Shepperd's method: pick the largest of the four candidate pivots.
    t = np.trace(R)
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = math.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return q


def _canonicalize(q: np.ndarray) -> np.ndarray:
    q = q / math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if q[0] < 0.0:
        q = -q
    return q


# ---------------------------------------------------------------------------
# pose / twist value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation as unit quaternion (w,x,y,z) + translation.

    Immutable value; all operations return new poses. The quaternion is
    renormalized and canonicalized (w >= 0) on construction.
    """

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        q = _canonicalize(np.asarray(self.q, dtype=float))
        t = np.asarray(self.t, dtype=float).reshape(3).copy()
        t.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_rt(R: np.ndarray, t) -> "Pose":
        return Pose(_mat_to_quat(np.asarray(R, dtype=float)), np.asarray(t, dtype=float))

    @staticmethod
    def from_translation(x: float, y: float, z: float) -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.array([x, y, z]))

    @staticmethod
    def from_array(a) -> "Pose":
        """Inverse of as_array: [tx, ty, tz, qw, qx, qy, qz]."""
        a = np.asarray(a, dtype=float).reshape(7)
        return Pose(a[3:7], a[0:3])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.t, self.q])

    def rotation_matrix(self) -> np.ndarray:
        return _quat_to_mat(self.q)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(_quat_mul(self.q, other.q), self.t + _quat_rotate(self.q, other.t))

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        qc = np.array([self.q[0], -self.q[1], -self.q[2], -self.q[3]])
        return Pose(qc, -_quat_rotate(qc, self.t))

    def apply(self, p) -> np.ndarray:
        """Map a point (or Nx3 batch) from this pose's frame to the parent frame."""
        p = np.asarray(p, dtype=float)
        if p.ndim == 1:
            return _quat_rotate(self.q, p) + self.t
        return p @ self.rotation_matrix().T + self.t

    def rotation_angle(self) -> float:
        """Principal rotation angle in [0, pi]."""
        return 2.0 * math.atan2(np.linalg.norm(self.q[1:]), self.q[0])

    def __repr__(self) -> str:
        t = np.array2string(self.t, precision=4, suppress_small=True)
        q = np.array2string(self.q, precision=4, suppress_small=True)
        return f"Pose(t={t}, q={q})"


@dataclass(frozen=True)
class Twist:
    """se(3) element: rho = translational part (m), phi = rotational part (rad)."""

    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float).reshape(3))
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=float).reshape(3))

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vector(v) -> "Twist":
        v = np.asarray(v, dtype=float).reshape(6)
        return Twist(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_vector()))


# ---------------------------------------------------------------------------
# exp / log
# ---------------------------------------------------------------------------


def _so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """V(phi): translation factor of the SE(3) exponential."""
    theta = np.linalg.norm(phi)
    K = _skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    # 2 sin^2(t/2) = 1 - cos t avoids cancellation at small t
    half = 0.5 * theta
    c1 = 2.0 * math.sin(half) ** 2 / theta**2
    c2 = (theta - math.sin(theta)) / theta**3
    return np.eye(3) + c1 * K + c2 * (K @ K)


def _so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = _skew(phi)
    if theta < _SERIES_ANGLE:
        k = 1.0 / 12.0 + theta**2 / 720.0 + theta**4 / 30240.0
    else:
        k = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) - 0.5 * K + k * (K @ K)


def exp(t: Twist) -> Pose:
    """SE(3) exponential map (closed form, Taylor branch below 1e-8 rad)."""
    phi = t.phi
    theta = np.linalg.norm(phi)
    if theta < SMALL_ANGLE:
        half = 0.5 * phi
        q = _canonicalize(np.concatenate([[1.0 - 0.125 * theta**2], half]))
    else:
        half = 0.5 * theta
        q = np.concatenate([[math.cos(half)], (math.sin(half) / theta) * phi])
    trans = _so3_left_jacobian(phi) @ t.rho
    return Pose(q, trans)


def exp_vector(v: np.ndarray) -> Pose:
    return exp(Twist.from_vector(v))


def log(p: Pose) -> Twist:
    """SE(3) logarithm, principal branch.

    Raises AngleNearPi when the rotation angle is within 1e-6 of pi;
    callers in the optimizer damp the step instead of guessing an axis.
    """
    w = p.q[0]
    vn = np.linalg.norm(p.q[1:])
    theta = 2.0 * math.atan2(vn, w)
    if theta > math.pi - PI_MARGIN:
        raise AngleNearPi(f"rotation angle {theta:.9f} within {PI_MARGIN} of pi")
    if vn < 0.5 * SMALL_ANGLE:
        # q approx (1, phi/2): phi = 2 v / w to 2nd order
        phi = (2.0 / w) * p.q[1:]
    else:
        phi = (theta / vn) * p.q[1:]
    rho = _so3_left_jacobian_inv(phi) @ p.t
    return Twist(rho, phi)


def log_vector(p: Pose) -> np.ndarray:
    return log(p).as_vector()


def relative(p1: Pose, p2: Pose) -> Pose:
    """p1^-1 * p2: pose of frame 2 expressed in frame 1."""
    return p1.inverse() @ p2


# ---------------------------------------------------------------------------
# adjoint and right-Jacobian inverse (analytic derivatives for the optimizer)
# ---------------------------------------------------------------------------


def adjoint(p: Pose) -> np.ndarray:
    """6x6 Adjoint of p in [rho; phi] ordering: [[R, [t]x R], [0, R]]."""
    R = p.rotation_matrix()
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[:3, 3:] = _skew(p.t) @ R
    A[3:, 3:] = R
    return A


def _se3_Q(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Top-right block of the SE(3) left Jacobian (Barfoot's Q matrix)."""
    theta = np.linalg.norm(phi)
    P = _skew(rho)
    K = _skew(phi)
    KP = K @ P
    PK = P @ K
    KPK = KP @ K
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        a = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        b = -1.0 / 24.0 + t2 / 720.0 - t2 * t2 / 40320.0
        c = -1.0 / 120.0 + t2 / 5040.0 - t2 * t2 / 362880.0
    else:
        t2 = theta * theta
        t3 = t2 * theta
        a = (theta - math.sin(theta)) / t3
        b = (1.0 - 0.5 * t2 - math.cos(theta)) / (t2 * t2)
        c = (theta - math.sin(theta) - t3 / 6.0) / (t2 * t3)
    m1 = KP + PK + KPK
    m2 = K @ KP + PK @ K - 3.0 * KPK
    m3 = KPK @ K + K @ KPK
    return 0.5 * P + a * m1 - b * m2 - 0.5 * (b - 3.0 * c) * m3


def left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse left Jacobian of SE(3) at twist vector xi = [rho; phi]."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    Jinv = _so3_left_jacobian_inv(phi)
    Q = _se3_Q(rho, phi)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[:3, 3:] = -Jinv @ Q @ Jinv
    return out


def right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian: d/d(delta) Log(exp(xi) exp(delta)) at delta=0."""
    return left_jacobian_inv(-np.asarray(xi, dtype=float).reshape(6))


# ---------------------------------------------------------------------------
# information matrices
# ---------------------------------------------------------------------------


def info_from_diag(diag) -> np.ndarray:
    return np.diag(np.asarray(diag, dtype=float).reshape(6))


def validate_info(m: np.ndarray) -> None:
    """Symmetric within 1e-12, eigenvalues >= -1e-12; raises ValueError otherwise."""
    m = np.asarray(m, dtype=float)
    if m.shape != (6, 6):
        raise ValueError(f"information matrix must be 6x6, got {m.shape}")
    if np.max(np.abs(m - m.T)) > 1e-12:
        raise ValueError("information matrix not symmetric")
    if np.min(np.linalg.eigvalsh(0.5 * (m + m.T))) < -1e-12:
        raise ValueError("information matrix not positive semi-definite")


# ---------------------------------------------------------------------------
# trajectory alignment
# ---------------------------------------------------------------------------


def umeyama_align(estimated, ground_truth) -> Pose:
    """Rigid transform S minimizing sum ||gt_i - S * est_i||^2 over translations.

    Scale is fixed at 1 (SE(3), not a similarity). Inputs are sequences of
    Pose (or Nx3 arrays of translations) of equal length >= 3.
    Raises DegenerateGeometry when the centered estimate points have rank < 2.
    """
    est = _translations(estimated)
    gt = _translations(ground_truth)
    if est.shape != gt.shape:
        raise ValueError("sequences must have equal length")
    n = est.shape[0]
    if n < 3:
        raise DegenerateGeometry(f"need >= 3 poses, got {n}")
    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    ec = est - mu_e
    gc = gt - mu_g
    sv = np.linalg.svd(ec, compute_uv=False)
    if sv[0] <= 0.0 or sv[1] <= 1e-12 * sv[0] + 1e-15:
        raise DegenerateGeometry("centered point matrix has rank < 2")
    # R = argmax tr(R C), C = sum ec gc^T; Kabsch with reflection guard
    C = ec.T @ gc
    U, _, Vt = np.linalg.svd(C)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    t = mu_g - R @ mu_e
    return Pose.from_rt(R, t)


def _translations(seq) -> np.ndarray:
    if isinstance(seq, np.ndarray) and seq.ndim == 2:
        return np.asarray(seq, dtype=float)
    return np.array([p.t if isinstance(p, Pose) else np.asarray(p[:3]) for p in seq])


# ---------------------------------------------------------------------------
# distances (test + metrics helpers)
# ---------------------------------------------------------------------------


def translation_distance(p1: Pose, p2: Pose) -> float:
    return float(np.linalg.norm(p1.t - p2.t))


def rotation_distance(p1: Pose, p2: Pose) -> float:
    """Angle of the relative rotation, in radians."""
    return relative(p1, p2).rotation_angle()


# ---------------------------------------------------------------------------
# batched array forms
#
# Same math as the Pose methods above, but on stacked arrays: quaternions are
# (..., 4) wxyz, vectors (..., 3), broadcasting over leading axes. Trajectory
# generation and metrics push 1e5+ samples through these; per-sample Pose
# objects are two orders of magnitude slower.
# ---------------------------------------------------------------------------


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    w = aw * bw - ax * bx - ay * by - az * bz
    out = np.empty(w.shape + (4,))
    out[..., 0] = w
    out[..., 1] = aw * bx + ax * bw + ay * bz - az * by
    out[..., 2] = aw * by - ax * bz + ay * bw + az * bx
    out[..., 3] = aw * bz + ax * by - ay * bx + az * bw
    return out


def quat_conj(q: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=float, copy=True)
    out[..., 1:] *= -1.0
    return out


def _cross_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # np.cross's axis plumbing is a hot spot at small batch sizes
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    x = ay * bz - az * by
    out = np.empty(x.shape + (3,))
    out[..., 0] = x
    out[..., 1] = az * bx - ax * bz
    out[..., 2] = ax * by - ay * bx
    return out


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    u = q[..., 1:]
    t = 2.0 * _cross_arrays(u, v)
    return v + q[..., :1] * t + _cross_arrays(u, t)


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Flip sign where w < 0 so each quaternion is in the canonical half-sphere."""
    q = np.asarray(q, dtype=float)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_from_rotvec(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1, keepdims=True)
    # sin(t/2)/t = 0.5 sinc(t / 2pi); exact and smooth through zero
    half_sinc = 0.5 * np.sinc(theta / (2.0 * np.pi))
    out = np.empty(phi.shape[:-1] + (4,))
    out[..., :1] = np.cos(0.5 * theta)
    out[..., 1:] = half_sinc * phi
    return out


def exp_arrays(rho: np.ndarray, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch exp of twists split as (rho, phi); returns (quat, translation)."""
    rho = np.asarray(rho, dtype=float)
    phi = np.asarray(phi, dtype=float)
    theta = np.sqrt((phi * phi).sum(axis=-1, keepdims=True))
    # sin(t/2)/t = 0.5 sinc(t / 2pi); exact and smooth through zero
    half_sinc = 0.5 * np.sinc(theta / (2.0 * np.pi))
    q = np.empty(phi.shape[:-1] + (4,))
    q[..., :1] = np.cos(0.5 * theta)
    q[..., 1:] = half_sinc * phi
    # V = I + a [phi]_x + b [phi]_x^2, a = (1-cos t)/t^2, b = (t - sin t)/t^3
    a = 2.0 * half_sinc * half_sinc  # = (1-cos t)/t^2 exactly
    with np.errstate(invalid="ignore", divide="ignore"):
        b_closed = (theta - np.sin(theta)) / theta**3
    b = np.where(theta < 1e-2, 1.0 / 6.0 - theta**2 / 120.0, b_closed)
    pr = _cross_arrays(phi, rho)
    t = rho + a * pr + b * _cross_arrays(phi, pr)
    return q, t


def compose_arrays(
    qa: np.ndarray, ta: np.ndarray, qb: np.ndarray, tb: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Batch pose composition a @ b as (quat, translation) pairs."""
    return quat_mul(qa, qb), ta + quat_rotate(qa, tb)


def relative_arrays(
    qa: np.ndarray, ta: np.ndarray, qb: np.ndarray, tb: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Batch a^-1 @ b as (quat, translation) pairs."""
    qa_inv = quat_conj(qa)
    return quat_mul(qa_inv, qb), quat_rotate(qa_inv, tb - ta)


def _skew_arrays(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def quat_to_mat_arrays(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = 2 * x * x, 2 * y * y, 2 * z * z
    xy, xz, yz = 2 * x * y, 2 * x * z, 2 * y * z
    wx, wy, wz = 2 * w * x, 2 * w * y, 2 * w * z
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - yy - zz
    out[..., 0, 1] = xy - wz
    out[..., 0, 2] = xz + wy
    out[..., 1, 0] = xy + wz
    out[..., 1, 1] = 1 - xx - zz
    out[..., 1, 2] = yz - wx
    out[..., 2, 0] = xz - wy
    out[..., 2, 1] = yz + wx
    out[..., 2, 2] = 1 - xx - yy
    return out


def log_arrays(q: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch SE(3) logarithm to (rho, phi); same branches as the scalar log.

    Raises AngleNearPi if any row is within the margin of pi.
    """
    q = quat_canonical(q)
    t = np.asarray(t, dtype=float)
    v = q[..., 1:]
    vn = np.sqrt((v * v).sum(axis=-1))
    w = q[..., 0]
    theta = 2.0 * np.arctan2(vn, w)
    if np.any(theta > np.pi - PI_MARGIN):
        raise AngleNearPi("rotation angle within margin of pi in batch log")
    small = vn < 0.5 * SMALL_ANGLE
    scale = np.where(small, 2.0 / w, theta / np.where(small, 1.0, vn))
    phi = scale[..., None] * v
    jinv = _so3_jinv_core(_skew_arrays(phi), theta)
    rho = (jinv @ t[..., None])[..., 0]
    return rho, phi


def _so3_jinv_core(K: np.ndarray, theta: np.ndarray) -> np.ndarray:
    t2 = theta * theta
    # over: 1/t2 blows up for subnormal theta before the series branch wins
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        closed = 1.0 / t2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    series = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    k = np.where(theta < _SERIES_ANGLE, series, closed)
    out = -0.5 * K + k[..., None, None] * (K @ K)
    out[..., 0, 0] += 1.0
    out[..., 1, 1] += 1.0
    out[..., 2, 2] += 1.0
    return out


def _so3_jacobian_inv_arrays(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.sqrt((phi * phi).sum(axis=-1))
    return _so3_jinv_core(_skew_arrays(phi), theta)


def _se3_q_core(P: np.ndarray, K: np.ndarray, theta: np.ndarray) -> np.ndarray:
    KP = K @ P
    PK = P @ K
    KPK = KP @ K
    t2 = theta * theta
    t3 = t2 * theta
    with np.errstate(divide="ignore", invalid="ignore"):
        a_closed = (theta - np.sin(theta)) / t3
        b_closed = (1.0 - 0.5 * t2 - np.cos(theta)) / (t2 * t2)
        c_closed = (theta - np.sin(theta) - t3 / 6.0) / (t2 * t3)
    t4 = t2 * t2
    small = theta < _SERIES_ANGLE
    a = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0, a_closed)
    b = np.where(small, -1.0 / 24.0 + t2 / 720.0 - t4 / 40320.0, b_closed)
    c = np.where(small, -1.0 / 120.0 + t2 / 5040.0 - t4 / 362880.0, c_closed)
    m1 = KP + PK + KPK
    m2 = K @ KP + PK @ K - 3.0 * KPK
    m3 = KPK @ K + K @ KPK
    a = a[..., None, None]
    b = b[..., None, None]
    c = c[..., None, None]
    return 0.5 * P + a * m1 - b * m2 - 0.5 * (b - 3.0 * c) * m3


def _se3_q_arrays(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.sqrt((phi * phi).sum(axis=-1))
    return _se3_q_core(_skew_arrays(rho), _skew_arrays(phi), theta)


def left_jacobian_inv_arrays(xi: np.ndarray) -> np.ndarray:
    """Batch inverse left Jacobian at twist rows xi (..., 6)."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    theta = np.sqrt((phi * phi).sum(axis=-1))
    K = _skew_arrays(phi)
    jinv = _so3_jinv_core(K, theta)
    q = _se3_q_core(_skew_arrays(rho), K, theta)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = jinv
    out[..., 3:, 3:] = jinv
    out[..., :3, 3:] = -jinv @ q @ jinv
    return out


def right_jacobian_inv_arrays(xi: np.ndarray) -> np.ndarray:
    return left_jacobian_inv_arrays(-np.asarray(xi, dtype=float))


def log_and_jinvs_arrays(
    q: np.ndarray, t: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batch log with both inverse Jacobians at the resulting twist.

    Returns (rho, phi, jl_inv, jr_inv) with jr_inv(xi) = jl_inv(-xi).
    Gauss-Newton consumes all three per residual row, and negating the
    twist only flips the odd-degree products, so computing them together
    costs far less than log_arrays plus two *_jacobian_inv_arrays calls.

    Raises AngleNearPi under the same condition as log_arrays.
    """
    q = quat_canonical(q)
    t = np.asarray(t, dtype=float)
    v = q[..., 1:]
    vn = np.sqrt((v * v).sum(axis=-1))
    w = q[..., 0]
    theta = 2.0 * np.arctan2(vn, w)
    if np.any(theta > np.pi - PI_MARGIN):
        raise AngleNearPi("rotation angle within margin of pi in batch log")
    small = vn < 0.5 * SMALL_ANGLE
    scale = np.where(small, 2.0 / w, theta / np.where(small, 1.0, vn))
    phi = scale[..., None] * v

    K = _skew_arrays(phi)
    K2 = K @ K
    t2 = theta * theta
    t3 = t2 * theta
    t4 = t2 * t2
    sin_t = np.sin(theta)
    cos_t = np.cos(theta)
    tiny = theta < _SERIES_ANGLE
    # over: 1/t2 blows up for subnormal theta before the series branch wins
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        k_closed = 1.0 / t2 - (1.0 + cos_t) / (2.0 * theta * sin_t)
        a_closed = (theta - sin_t) / t3
        b_closed = (1.0 - 0.5 * t2 - cos_t) / t4
        c_closed = (theta - sin_t - t3 / 6.0) / (t2 * t3)
    k = np.where(tiny, 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0, k_closed)
    kk2 = k[..., None, None] * K2
    half_k = 0.5 * K
    jso_l = kk2 - half_k  # SO(3) Jl^-1(phi)
    jso_r = kk2 + half_k  # SO(3) Jl^-1(-phi)
    for jso in (jso_l, jso_r):
        jso[..., 0, 0] += 1.0
        jso[..., 1, 1] += 1.0
        jso[..., 2, 2] += 1.0
    rho = (jso_l @ t[..., None])[..., 0]

    # Q(rho, phi) as in _se3_q_core, and Q(-rho, -phi) from the same
    # products: monomials of odd degree in (P, K) change sign, even ones
    # do not.
    P = _skew_arrays(rho)
    a = np.where(tiny, 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0, a_closed)
    b = np.where(tiny, -1.0 / 24.0 + t2 / 720.0 - t4 / 40320.0, b_closed)
    c = np.where(tiny, -1.0 / 120.0 + t2 / 5040.0 - t4 / 362880.0, c_closed)
    a = a[..., None, None]
    b = b[..., None, None]
    d = 0.5 * (b - 3.0 * c[..., None, None])
    KP = K @ P
    PK = P @ K
    KPK = KP @ K
    half_p = 0.5 * P
    even = a * (KP + PK) - d * (KPK @ K + K @ KPK)
    m2 = K @ KP + PK @ K - 3.0 * KPK
    akpk = a * KPK
    q_p = half_p + even + akpk - b * m2
    q_m = even - half_p - akpk + b * m2

    jl = np.zeros(phi.shape[:-1] + (6, 6))
    jl[..., :3, :3] = jso_l
    jl[..., 3:, 3:] = jso_l
    jl[..., :3, 3:] = -jso_l @ q_p @ jso_l
    jr = np.zeros(phi.shape[:-1] + (6, 6))
    jr[..., :3, :3] = jso_r
    jr[..., 3:, 3:] = jso_r
    jr[..., :3, 3:] = -jso_r @ q_m @ jso_r
    return rho, phi, jl, jr


def adjoint_arrays(q: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Batch 6x6 adjoints in [rho; phi] ordering from (quat, translation)."""
    R = quat_to_mat_arrays(q)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., :3, 3:] = _skew_arrays(t) @ R
    out[..., 3:, 3:] = R
    return out
