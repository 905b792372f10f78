"""Quaternion and rotation kernel (JPL convention).

Quaternions are numpy arrays ordered ``[qx, qy, qz, qw]`` (scalar last).  A
quaternion ``q`` labelled "A -> B" has rotation matrix ``C(q)`` that maps
coordinates expressed in frame A into frame B, and products compose as
``C(a ⊗ b) = C(a) @ C(b)``.  Attitude errors are left-multiplicative:
``q = δq ⊗ q̂`` with ``δq ≈ [δθ/2, 1]`` and ``C(δq) ≈ I - [δθ]x``.
"""

import numpy as np

NORM_TOL = 1e-12


def skew(v):
    """Skew-symmetric matrix such that ``skew(a) @ b == np.cross(a, b)``."""
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def identity():
    return np.array([0.0, 0.0, 0.0, 1.0])


def normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.sqrt(q @ q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    # canonical sign keeps the scalar part non-negative
    return -q if q[3] < 0.0 else q


def multiply(a, b):
    """JPL product ``a ⊗ b``; satisfies ``to_rotation(a ⊗ b) == to_rotation(a) @ to_rotation(b)``."""
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    out = np.array([aw * bx + bw * ax - (ay * bz - az * by),
                    aw * by + bw * ay - (az * bx - ax * bz),
                    aw * bz + bw * az - (ax * by - ay * bx),
                    aw * bw - ax * bx - ay * by - az * bz])
    return normalize(out)


def inverse(q):
    return np.array([-q[0], -q[1], -q[2], q[3]])


def to_rotation(q):
    """Rotation matrix ``C(q)``."""
    x, y, z, w = q
    d = 2.0 * w * w - 1.0
    return np.array([[d + 2 * x * x, 2 * (x * y + w * z), 2 * (x * z - w * y)],
                     [2 * (x * y - w * z), d + 2 * y * y, 2 * (y * z + w * x)],
                     [2 * (x * z + w * y), 2 * (y * z - w * x), d + 2 * z * z]])


def from_rotation(C):
    """Inverse of :func:`to_rotation` (Shepperd's method)."""
    C = np.asarray(C, dtype=float)
    tr = np.trace(C)
    # largest of the four squared components picks a well-conditioned branch
    diag = np.array([C[0, 0], C[1, 1], C[2, 2], tr])
    i = int(np.argmax(diag))
    q = np.empty(4)
    if i == 3:
        w = 0.5 * np.sqrt(1.0 + tr)
        q[3] = w
        q[0] = (C[1, 2] - C[2, 1]) / (4.0 * w)
        q[1] = (C[2, 0] - C[0, 2]) / (4.0 * w)
        q[2] = (C[0, 1] - C[1, 0]) / (4.0 * w)
    else:
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 0.5 * np.sqrt(1.0 + 2.0 * C[i, i] - tr)
        q[i] = s
        q[j] = (C[i, j] + C[j, i]) / (4.0 * s)
        q[k] = (C[i, k] + C[k, i]) / (4.0 * s)
        q[3] = (C[j, k] - C[k, j]) / (4.0 * s)
    return normalize(q)


def from_axis_angle(axis, angle):
    """Quaternion whose rotation matrix is the passive rotation by ``angle`` about ``axis``.

    ``to_rotation(from_axis_angle(k, a))`` equals ``expm(-a [k]x)``, so
    ``from_rotvec(δθ)`` agrees with :func:`small_angle_quat` to first order.
    """
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return identity()
    axis = axis / n
    q = np.empty(4)
    q[:3] = np.sin(0.5 * angle) * axis
    q[3] = np.cos(0.5 * angle)
    return normalize(q)


def from_rotvec(theta):
    theta = np.asarray(theta, dtype=float)
    return from_axis_angle(theta, np.linalg.norm(theta))


def to_rotvec(q):
    """Rotation vector ``θ`` with ``from_rotvec(θ) == q`` (angle in [0, π])."""
    q = normalize(q)
    s = np.linalg.norm(q[:3])
    if s < 1e-12:
        return 2.0 * q[:3]
    angle = 2.0 * np.arctan2(s, q[3])
    return angle * q[:3] / s


def angle(q):
    """Rotation angle of ``q`` in radians, in [0, π]."""
    q = normalize(q)
    return 2.0 * np.arctan2(np.linalg.norm(q[:3]), q[3])


def small_angle_quat(delta_theta):
    """Error quaternion for a rotation vector, ``≈ [δθ/2, 1]`` to first order.

    The exact exponential map is used so the rotation angle equals ``|δθ|``
    rather than ``2·atan(|δθ|/2)``; the two agree to first order.
    """
    delta_theta = np.asarray(delta_theta, dtype=float)
    if np.linalg.norm(delta_theta) >= np.pi:
        raise ValueError("small_angle_quat called with |δθ| >= π")
    return from_rotvec(delta_theta)


def omega_matrix(w):
    """4x4 matrix of the kinematics ``dq/dt = 0.5 * omega_matrix(ω) @ q``.

    The scalar corner is zero so the flow preserves the quaternion norm.
    """
    W = np.zeros((4, 4))
    W[:3, :3] = -skew(w)
    W[:3, 3] = w
    W[3, :3] = -np.asarray(w)
    return W


def integrate_constant_rate(q, w, dt):
    """Closed-form solution of ``dq/dt = 0.5 Ω(ω) q`` for constant ``ω`` over ``dt``."""
    wn = np.linalg.norm(w)
    if wn < 1e-12:
        # second-order series of the same exponential
        step = np.eye(4) + 0.5 * dt * omega_matrix(w)
    else:
        half = 0.5 * wn * dt
        step = np.cos(half) * np.eye(4) + (np.sin(half) / wn) * omega_matrix(w)
    return normalize(step @ q)
