"""SMPL-style parametric body: shape blendshapes, forward kinematics, LBS.

Vertices are in millimetres, y up. A deterministic synthetic model with the
same array schema as SMPL is produced by :func:`make_toy_model`; real SMPL
coefficients can be converted into the container format and loaded with
:meth:`BodyModel.from_arrays`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ToolkitError

log = logging.getLogger(__name__)

NUM_JOINTS = 24
NUM_BETAS = 10
SMALL_ANGLE = 1e-8
MM_PER_UNIT = 1000.0  # weak-perspective camera works in metres

SMPL_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]
)

# LSP-14 keypoint order expressed as SMPL joint indices
LSP14_JOINTS = [8, 5, 2, 1, 4, 7, 21, 19, 17, 16, 18, 20, 12, 15]
LSP14_HIPS = (2, 3)


@dataclass(frozen=True)
class BodyModel:
    template: np.ndarray  # (N, 3) mm
    blendshapes: np.ndarray  # (N, 3, 10)
    weights: np.ndarray  # (N, J)
    parents: np.ndarray  # (J,)
    jreg_rest: np.ndarray  # (J, N)
    jreg_kp: np.ndarray  # (N_j, N)
    downsample: np.ndarray  # (S, N)
    faces: np.ndarray  # (F, 3) int
    uv_table: np.ndarray  # (N, 3): part index, u, v

    ARRAY_NAMES = (
        "template",
        "blendshapes",
        "weights",
        "parents",
        "Jreg_rest",
        "Jreg_kp",
        "downsample",
        "faces",
        "uv_table",
    )

    def __post_init__(self):
        N = self.template.shape[0]
        J = len(self.parents)
        if self.template.shape != (N, 3) or self.blendshapes.shape[:2] != (N, 3):
            raise ToolkitError("shape", "template/blendshapes shapes inconsistent")
        if self.weights.shape != (N, J) or self.jreg_rest.shape != (J, N):
            raise ToolkitError("shape", "skinning weights / joint regressor shapes inconsistent")
        for name in ("jreg_kp", "downsample"):
            if getattr(self, name).shape[1] != N:
                raise ToolkitError("shape", f"{name} must have {N} columns")
        if self.uv_table.shape != (N, 3):
            raise ToolkitError("shape", "uv_table must be (N, 3)")
        if np.any(self.weights < 0) or not np.allclose(self.weights.sum(1), 1.0, atol=1e-6):
            raise ToolkitError("weights", "skinning weight rows must be >= 0 and sum to 1")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= N):
            raise ToolkitError("faces", "face index out of range")
        _check_tree(self.parents)

    @property
    def num_vertices(self):
        return self.template.shape[0]

    @property
    def num_joints(self):
        return len(self.parents)

    @property
    def num_keypoints(self):
        return self.jreg_kp.shape[0]

    def to_arrays(self):
        return {
            "template": self.template,
            "blendshapes": self.blendshapes,
            "weights": self.weights,
            "parents": self.parents.astype(np.int64),
            "Jreg_rest": self.jreg_rest,
            "Jreg_kp": self.jreg_kp,
            "downsample": self.downsample,
            "faces": self.faces.astype(np.int64),
            "uv_table": self.uv_table,
        }

    @classmethod
    def from_arrays(cls, arrays):
        missing = [k for k in cls.ARRAY_NAMES if k not in arrays]
        if missing:
            raise ToolkitError("schema", f"body model missing arrays: {missing}")
        f = lambda k: np.asarray(arrays[k], dtype=np.float64)
        return cls(
            template=f("template"),
            blendshapes=f("blendshapes"),
            weights=f("weights"),
            parents=np.asarray(arrays["parents"], dtype=np.int64),
            jreg_rest=f("Jreg_rest"),
            jreg_kp=f("Jreg_kp"),
            downsample=f("downsample"),
            faces=np.asarray(arrays["faces"], dtype=np.int64),
            uv_table=f("uv_table"),
        )


def _check_tree(parents):
    parents = np.asarray(parents)
    roots = np.flatnonzero(parents < 0)
    if len(roots) != 1 or roots[0] != 0:
        raise ToolkitError("tree", "joint tree must have exactly one root at index 0")
    # parents listed before children rules out cycles
    for j in range(1, len(parents)):
        if not 0 <= parents[j] < j:
            raise ToolkitError("tree", f"joint {j} has invalid parent {parents[j]}")


@dataclass(frozen=True)
class Camera:
    scale: float = 0.9
    tx: float = 0.0
    ty: float = 0.0


@dataclass(frozen=True)
class BodyParams:
    pose: np.ndarray  # (J, 3) axis-angle
    betas: np.ndarray  # (10,)
    camera: Camera

    @classmethod
    def neutral(cls, num_joints=NUM_JOINTS):
        return cls(np.zeros((num_joints, 3)), np.zeros(NUM_BETAS), Camera())

    @property
    def size(self):
        return self.pose.size + self.betas.size + 3

    def to_vector(self):
        c = self.camera
        return np.concatenate([self.pose.ravel(), self.betas, [c.scale, c.tx, c.ty]])

    @classmethod
    def from_vector(cls, vec, num_joints=NUM_JOINTS):
        vec = np.asarray(vec, dtype=np.float64)
        n_pose = num_joints * 3
        if vec.shape != (n_pose + NUM_BETAS + 3,):
            raise ToolkitError("shape", f"parameter vector has shape {vec.shape}")
        s, tx, ty = vec[-3:]
        return cls(
            vec[:n_pose].reshape(num_joints, 3).copy(),
            vec[n_pose : n_pose + NUM_BETAS].copy(),
            Camera(float(s), float(tx), float(ty)),
        )


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray


def rodrigues(axis_angle):
    """Rotation matrices for ``(..., 3)`` axis-angle vectors.

    Below ``SMALL_ANGLE`` the second-order series ``I + K + K^2/2`` is used,
    where ``K`` is the skew matrix of the (unnormalised) vector.
    """
    aa = np.asarray(axis_angle, dtype=np.float64)
    shape = aa.shape[:-1]
    aa = aa.reshape(-1, 3)
    theta = np.linalg.norm(aa, axis=1)
    K = np.zeros((len(aa), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -aa[:, 2], aa[:, 1]
    K[:, 1, 0], K[:, 1, 2] = aa[:, 2], -aa[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -aa[:, 1], aa[:, 0]
    KK = K @ K

    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    R = np.eye(3) + a[:, None, None] * K + b[:, None, None] * KK
    return R.reshape(*shape, 3, 3)


def canonicalize_axis_angle(pose):
    """Wrap each rotation angle into [0, 2*pi) without changing the rotation."""
    pose = np.asarray(pose, dtype=np.float64).reshape(-1, 3)
    theta = np.linalg.norm(pose, axis=1)
    wrapped = np.mod(theta, 2.0 * np.pi)
    scale = np.where(theta > 0, wrapped / np.where(theta > 0, theta, 1.0), 1.0)
    return pose * scale[:, None]


def shape_blend(model, betas):
    betas = np.asarray(betas, dtype=np.float64)
    if betas.shape != (NUM_BETAS,):
        raise ToolkitError("shape", f"betas must have {NUM_BETAS} entries, got {betas.shape}")
    if np.any(np.abs(betas) > 5):
        log.warning("shape coefficients outside the usual [-5, 5] range: %s", betas)
    return Mesh(model.template + model.blendshapes @ betas, model.faces)


def pose_mesh(model, shaped, pose):
    """Forward kinematics plus linear blend skinning.

    Returns the posed mesh and the posed joint positions ``(J, 3)``.
    """
    pose = np.asarray(pose, dtype=np.float64)
    J = model.num_joints
    if pose.shape != (J, 3):
        raise ToolkitError("shape", f"pose must be ({J}, 3), got {pose.shape}")
    verts = shaped.vertices
    rest_joints = model.jreg_rest @ verts
    rots = rodrigues(pose)

    glob_R = np.zeros((J, 3, 3))
    glob_t = np.zeros((J, 3))
    glob_R[0] = rots[0]
    glob_t[0] = rest_joints[0]
    for j in range(1, J):
        p = model.parents[j]
        glob_R[j] = glob_R[p] @ rots[j]
        glob_t[j] = glob_R[p] @ (rest_joints[j] - rest_joints[p]) + glob_t[p]

    # transforms relative to the rest pose: x -> R (x - j_rest) + j_posed
    rel_t = glob_t - np.einsum("jab,jb->ja", glob_R, rest_joints)
    blend_R = np.einsum("nj,jab->nab", model.weights, glob_R)
    blend_t = model.weights @ rel_t
    posed = np.einsum("nab,nb->na", blend_R, verts) + blend_t
    return Mesh(posed, shaped.faces), glob_t


def body_forward(model, params):
    """Shape, pose and regress keypoints: returns ``(mesh, keypoints3d, joints3d)``."""
    shaped = shape_blend(model, params.betas)
    mesh, joints = pose_mesh(model, shaped, params.pose)
    return mesh, model.jreg_kp @ mesh.vertices, joints


def downsample_vertices(mesh, model):
    return model.downsample @ mesh.vertices


def project_weak_perspective(points3d, camera, unit=1.0):
    """``s * (x, y) / unit + (tx, ty)``: normalized image coordinates, depth dropped."""
    if not camera.scale > 0:
        raise ToolkitError("camera", f"camera scale must be > 0, got {camera.scale}")
    pts = np.asarray(points3d, dtype=np.float64)
    return camera.scale * pts[..., :2] / unit + np.array([camera.tx, camera.ty])


def normalized_to_pixels(points2d, size):
    """Map [-1, 1] normalized coordinates to continuous pixel coordinates in [0, size]."""
    return (np.asarray(points2d, dtype=np.float64) + 1.0) * (size / 2.0)


def pixels_to_normalized(points2d, size):
    return np.asarray(points2d, dtype=np.float64) * (2.0 / size) - 1.0


# -- synthetic model ---------------------------------------------------------

_REST_JOINTS_M = np.array(
    [
        [0.00, 0.00, 0.00],  # pelvis
        [0.09, -0.09, 0.00],
        [-0.09, -0.09, 0.00],
        [0.00, 0.10, -0.02],
        [0.10, -0.47, 0.00],
        [-0.10, -0.47, 0.00],
        [0.00, 0.23, 0.00],
        [0.10, -0.87, -0.03],
        [-0.10, -0.87, -0.03],
        [0.00, 0.28, 0.01],
        [0.12, -0.93, 0.10],
        [-0.12, -0.93, 0.10],
        [0.00, 0.50, -0.01],
        [0.07, 0.41, 0.00],
        [-0.07, 0.41, 0.00],
        [0.00, 0.60, 0.04],
        [0.17, 0.44, -0.01],
        [-0.17, 0.44, -0.01],
        [0.43, 0.43, -0.02],
        [-0.43, 0.43, -0.02],
        [0.68, 0.43, -0.01],
        [-0.68, 0.43, -0.01],
        [0.76, 0.42, -0.01],
        [-0.76, 0.42, -0.01],
    ]
)

# coarse parts: 1 torso, 2 left arm, 3 right arm, 4 left leg, 5 right leg, 6 head
_JOINT_PART = [1, 4, 5, 1, 4, 5, 1, 4, 5, 1, 4, 5, 6, 2, 3, 6, 2, 3, 2, 3, 2, 3, 2, 3]
_BONE_RADIUS_M = {1: 0.09, 2: 0.04, 3: 0.04, 4: 0.06, 5: 0.06, 6: 0.07}
RING = 8
STATIONS = (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0)
TOY_DOWNSAMPLE = 431
TOY_KEYPOINTS = len(LSP14_JOINTS)


def _ring_frame(direction):
    d = direction / np.linalg.norm(direction)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(d, e1)


def make_toy_model(seed=0):
    """Deterministic capsule-skeleton body with the SMPL array schema.

    Every bone (parent -> child) is a tube of ``RING``-vertex rings at four
    stations plus two cap centres. Vertices of a bone are skinned to the
    parent joint, the first ring half-blended with the grandparent joint.
    Rest joints are regressed exactly as the mean of the rings centred on
    them, so ``Jreg_rest @ template`` reproduces the skeleton.
    """
    rng = np.random.default_rng(seed)
    J = NUM_JOINTS
    joints_mm = _REST_JOINTS_M * MM_PER_UNIT

    verts, weights, uv, faces = [], [], [], []
    ring_center_of = []  # per vertex: (joint the ring is centred on or -1)
    axial = []  # per vertex: unit radial offset direction * radius (for girth)
    for child in range(1, J):
        parent = SMPL_PARENTS[child]
        a, b = joints_mm[parent], joints_mm[child]
        e1, e2 = _ring_frame(b - a)
        part = _JOINT_PART[child]
        radius = _BONE_RADIUS_M[part] * MM_PER_UNIT
        if part in (2, 3) and child in (22, 23):
            radius *= 0.8
        w_row = np.zeros(J)
        w_row[parent] = 1.0
        w_blend = np.zeros(J)
        gp = SMPL_PARENTS[parent]
        if gp >= 0:
            w_blend[parent] = 0.5
            w_blend[gp] = 0.5
        else:
            w_blend = w_row

        base = len(verts)
        for s_idx, s in enumerate(STATIONS):
            center = a + s * (b - a)
            for k in range(RING):
                ang = 2.0 * np.pi * k / RING
                off = radius * (np.cos(ang) * e1 + np.sin(ang) * e2)
                verts.append(center + off)
                axial.append(off)
                weights.append(w_blend if s_idx == 0 else w_row)
                uv.append([part, k / RING + 0.5 / RING, s])
                ring_center_of.append(parent if s_idx == 0 else (child if s_idx == 3 else -1))
        for s_idx in range(len(STATIONS) - 1):
            for k in range(RING):
                i0 = base + s_idx * RING + k
                i1 = base + s_idx * RING + (k + 1) % RING
                faces.append([i0, i1, i1 + RING])
                faces.append([i0, i1 + RING, i0 + RING])
        for s_idx, center in ((0, a), (len(STATIONS) - 1, b)):
            ci = len(verts)
            verts.append(center.copy())
            axial.append(np.zeros(3))
            weights.append(w_blend if s_idx == 0 else w_row)
            uv.append([part, 0.5, STATIONS[s_idx]])
            ring_center_of.append(-1)
            ring0 = base + s_idx * RING
            for k in range(RING):
                i0, i1 = ring0 + k, ring0 + (k + 1) % RING
                faces.append([ci, i1, i0] if s_idx == 0 else [ci, i0, i1])

    verts = np.array(verts)
    N = len(verts)
    ring_center_of = np.array(ring_center_of)
    axial = np.array(axial)

    jreg_rest = np.zeros((J, N))
    for j in range(J):
        # every ring tagged with j is centred on joint j
        idx = np.flatnonzero(ring_center_of == j)
        jreg_rest[j, idx] = 1.0 / len(idx)

    blend = np.zeros((N, 3, NUM_BETAS))
    blend[:, :, 0] = verts * 0.05  # stature
    blend[:, :, 1] = axial * 0.15  # girth
    for i in range(2, NUM_BETAS):
        M = rng.normal(0.0, 0.01, size=(3, 3))
        blend[:, :, i] = verts @ M.T

    jreg_kp = jreg_rest[LSP14_JOINTS].copy()
    keep = np.round(np.linspace(0, N - 1, TOY_DOWNSAMPLE)).astype(np.int64)
    downsample = np.zeros((TOY_DOWNSAMPLE, N))
    downsample[np.arange(TOY_DOWNSAMPLE), keep] = 1.0

    return BodyModel(
        template=verts,
        blendshapes=blend,
        weights=np.array(weights),
        parents=SMPL_PARENTS.copy(),
        jreg_rest=jreg_rest,
        jreg_kp=jreg_kp,
        downsample=downsample,
        faces=np.array(faces, dtype=np.int64),
        uv_table=np.array(uv),
    )
