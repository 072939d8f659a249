"""Motion representation: 147-wide frames, 6D rotations, forward kinematics.

A frame is [root translation (3); 24 joint rotations in 6D (144)], sampled
at 30 fps. Rotations are parent-relative: each 6D block is the rotation of
a joint in its parent's frame, and forward kinematics composes them down
the tree (see ``forward_kinematics``). All rotation/FK math runs through
the autodiff tensor ops so reconstruction losses can differentiate through
joint positions; plain ndarray inputs take the same code path and return
ndarrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateInputError, FormatError, ShapeError
from .tensor import Tensor

FPS = 30
JOINT_COUNT = 24
FRAME_WIDTH = 3 + 6 * JOINT_COUNT  # 147

# Kinematic tree, root first, every parent index smaller than its child.
PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]
)

JOINT_NAMES = (
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_hand", "r_hand",
)

# Rest-pose bone offsets in meters, y-up. Synthetic but humanoid-proportioned.
DEFAULT_OFFSETS = np.array([
    [0.00, 0.00, 0.00],    # pelvis (root; offset unused)
    [0.09, -0.06, 0.00],   # l_hip
    [-0.09, -0.06, 0.00],  # r_hip
    [0.00, 0.11, 0.00],    # spine1
    [0.04, -0.38, 0.00],   # l_knee
    [-0.04, -0.38, 0.00],  # r_knee
    [0.00, 0.12, 0.00],    # spine2
    [0.00, -0.40, -0.02],  # l_ankle
    [0.00, -0.40, -0.02],  # r_ankle
    [0.00, 0.06, 0.00],    # spine3
    [0.00, -0.06, 0.12],   # l_foot
    [0.00, -0.06, 0.12],   # r_foot
    [0.00, 0.21, -0.01],   # neck
    [0.08, 0.11, 0.00],    # l_collar
    [-0.08, 0.11, 0.00],   # r_collar
    [0.00, 0.07, 0.02],    # head
    [0.11, 0.02, 0.00],    # l_shoulder
    [-0.11, 0.02, 0.00],   # r_shoulder
    [0.26, 0.00, 0.00],    # l_elbow
    [-0.26, 0.00, 0.00],   # r_elbow
    [0.25, 0.00, 0.00],    # l_wrist
    [-0.25, 0.00, 0.00],   # r_wrist
    [0.08, 0.00, 0.00],    # l_hand
    [-0.08, 0.00, 0.00],   # r_hand
])

# Body-part routing for the two-branch codec. The lower set carries the
# root translation as well, so widths are 3 + 9*6 = 57 and 15*6 = 90.
LOWER_JOINTS = (0, 1, 2, 4, 5, 7, 8, 10, 11)
UPPER_JOINTS = tuple(j for j in range(JOINT_COUNT) if j not in LOWER_JOINTS)
LOWER_WIDTH = 3 + 6 * len(LOWER_JOINTS)
UPPER_WIDTH = 6 * len(UPPER_JOINTS)

_DEGENERACY_EPS = 1e-8


@dataclass
class Skeleton:
    """Joint tree plus rest-pose bone offsets."""

    parents: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=int)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        n = self.parents.shape[0]
        if self.offsets.shape != (n, 3):
            raise ShapeError(f"offsets must be ({n}, 3), got {self.offsets.shape}")
        if self.parents[0] != -1:
            raise ContractError("joint 0 must be the root (parent -1)")
        for j in range(1, n):
            if not 0 <= self.parents[j] < j:
                raise ContractError(f"parent of joint {j} must precede it, got {self.parents[j]}")

    @classmethod
    def default(cls) -> "Skeleton":
        return cls(PARENTS.copy(), DEFAULT_OFFSETS.copy())

    @property
    def joint_count(self) -> int:
        return self.parents.shape[0]


@dataclass
class BodyPartSplit:
    """Disjoint lower/upper joint sets covering the whole skeleton."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        self.lower = tuple(self.lower)
        self.upper = tuple(self.upper)
        overlap = set(self.lower) & set(self.upper)
        if overlap:
            raise ContractError(f"body-part sets overlap on joints {sorted(overlap)}")
        covered = sorted(self.lower + self.upper)
        if covered != list(range(JOINT_COUNT)):
            raise ContractError("body-part sets must partition all 24 joints")

    @classmethod
    def default(cls) -> "BodyPartSplit":
        return cls(LOWER_JOINTS, UPPER_JOINTS)

    @property
    def lower_width(self) -> int:
        return 3 + 6 * len(self.lower)

    @property
    def upper_width(self) -> int:
        return 6 * len(self.upper)


class MotionSequence:
    """A validated [T, 147] motion clip at 30 fps."""

    def __init__(self, frames: np.ndarray, fps: int = FPS):
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != FRAME_WIDTH:
            raise ShapeError(f"motion frames must be [T, {FRAME_WIDTH}], got {frames.shape}")
        if frames.shape[0] < 1:
            raise ShapeError("motion must contain at least one frame")
        if fps != FPS:
            raise FormatError(f"unsupported fps {fps}; this pipeline is fixed at {FPS}")
        if not np.isfinite(frames).all():
            raise FormatError("motion frames contain non-finite values")
        self.frames = frames
        self.fps = fps

    def __len__(self) -> int:
        return self.frames.shape[0]


def _wrap(x):
    """Return (tensor, was_ndarray) so functions accept either kind."""
    if isinstance(x, Tensor):
        return x, False
    return Tensor(np.asarray(x, dtype=np.float64)), True


def rot6d_to_matrix(r):
    """Gram-Schmidt a [..., 6] 6D rotation into [..., 3, 3].

    The six numbers are the first two matrix columns; the first is
    normalized, the second orthogonalized against it, the third is their
    cross product. Near-degenerate inputs (tiny first column, second
    column nearly parallel to the first) raise instead of being repaired:
    silent repair would hide upstream training bugs.
    """
    r, plain = _wrap(r)
    if r.shape[-1] != 6:
        raise ShapeError(f"6D rotations need a trailing axis of 6, got {r.shape}")

    a = T.narrow(r, r.ndim - 1, 0, 3)
    b = T.narrow(r, r.ndim - 1, 3, 3)

    a_norm = np.sqrt((a.data ** 2).sum(axis=-1))
    if (a_norm <= _DEGENERACY_EPS).any():
        raise DegenerateInputError("6D rotation with near-zero first column")

    col1 = a / T.sqrt((a * a).sum(axis=-1, keepdims=True))
    proj = (b * col1).sum(axis=-1, keepdims=True)
    ortho = b - proj * col1
    ortho_norm = np.sqrt((ortho.data ** 2).sum(axis=-1))
    if (ortho_norm <= _DEGENERACY_EPS).any():
        raise DegenerateInputError("6D rotation with columns nearly parallel")
    col2 = ortho / T.sqrt((ortho * ortho).sum(axis=-1, keepdims=True))
    col3 = _cross(col1, col2)

    last = col1.ndim
    cols = [c.reshape(c.shape + (1,)) for c in (col1, col2, col3)]
    mat = T.concat(cols, axis=last)
    return mat.data if plain else mat


def _cross(u: Tensor, v: Tensor) -> Tensor:
    ax = u.ndim - 1

    def comp(x, i):
        return T.narrow(x, ax, i, 1)

    cx = comp(u, 1) * comp(v, 2) - comp(u, 2) * comp(v, 1)
    cy = comp(u, 2) * comp(v, 0) - comp(u, 0) * comp(v, 2)
    cz = comp(u, 0) * comp(v, 1) - comp(u, 1) * comp(v, 0)
    return T.concat([cx, cy, cz], axis=ax)


def forward_kinematics(frames, skeleton: Skeleton | None = None):
    """Joint positions [..., T, 24, 3] from frames [..., T, 147].

    Composition: the root's global rotation is its own rotation and its
    position is the translation channel; every other joint multiplies its
    parent's global rotation and adds the parent-rotated bone offset.
    Positions are built root-relative and the translation is added once at
    the end, so shifting the translation shifts every joint exactly.
    """
    if skeleton is None:
        skeleton = Skeleton.default()
    x, plain = _wrap(frames)
    if x.shape[-1] != FRAME_WIDTH:
        raise ShapeError(f"frames must end in width {FRAME_WIDTH}, got {x.shape}")
    if x.ndim < 2:
        raise ShapeError("frames need at least a [T, width] shape")

    n = skeleton.joint_count
    last = x.ndim - 1
    trans = T.narrow(x, last, 0, 3)
    rots = T.narrow(x, last, 3, 6 * n).reshape(x.shape[:-1] + (n, 6))
    rmats = rot6d_to_matrix(rots)  # [..., T, n, 3, 3]

    def joint_rot(j):
        return T.narrow(rmats, rmats.ndim - 3, j, 1).reshape(x.shape[:-1] + (3, 3))

    globals_ = [joint_rot(0)]
    local = [None] * n  # root-relative positions [..., T, 3]
    local[0] = Tensor(np.zeros(x.shape[:-1] + (3,)))
    for j in range(1, n):
        parent = skeleton.parents[j]
        offset = Tensor(skeleton.offsets[j].reshape(3, 1))
        step = (globals_[parent] @ offset).reshape(x.shape[:-1] + (3,))
        local[j] = local[parent] + step
        globals_.append(globals_[parent] @ joint_rot(j))

    stacked = T.concat([p.reshape(p.shape[:-1] + (1, 3)) for p in local], axis=x.ndim - 1)
    positions = stacked + trans.reshape(trans.shape[:-1] + (1, 3))
    return positions.data if plain else positions


def _part_selector(joints: tuple, with_translation: bool) -> np.ndarray:
    cols = list(range(3)) if with_translation else []
    for j in joints:
        cols.extend(range(3 + 6 * j, 3 + 6 * j + 6))
    sel = np.zeros((FRAME_WIDTH, len(cols)))
    sel[cols, np.arange(len(cols))] = 1.0
    return sel


_SPLIT_CACHE: dict = {}


def _selectors(split: BodyPartSplit):
    key = (split.lower, split.upper)
    if key not in _SPLIT_CACHE:
        _SPLIT_CACHE[key] = (
            _part_selector(split.upper, with_translation=False),
            _part_selector(split.lower, with_translation=True),
        )
    return _SPLIT_CACHE[key]


def split_body(frames, split: BodyPartSplit | None = None):
    """Split [..., 147] frames into (upper [..., 90], lower [..., 57]).

    The lower part carries the root translation. Column selection is a
    0/1 matrix product, so it is exact and differentiates cleanly.
    """
    if split is None:
        split = BodyPartSplit.default()
    x, plain = _wrap(frames)
    if x.shape[-1] != FRAME_WIDTH:
        raise ShapeError(f"split_body expects trailing width {FRAME_WIDTH}, got {x.shape}")
    upper_sel, lower_sel = _selectors(split)
    upper = x @ Tensor(upper_sel)
    lower = x @ Tensor(lower_sel)
    return (upper.data, lower.data) if plain else (upper, lower)


def merge_body(upper, lower, split: BodyPartSplit | None = None):
    """Inverse of split_body; bit-exact because columns merely scatter back."""
    if split is None:
        split = BodyPartSplit.default()
    u, plain_u = _wrap(upper)
    l, plain_l = _wrap(lower)
    upper_sel, lower_sel = _selectors(split)
    if u.shape[-1] != upper_sel.shape[1] or l.shape[-1] != lower_sel.shape[1]:
        raise ShapeError(
            f"merge_body widths must be ({upper_sel.shape[1]}, {lower_sel.shape[1]}), "
            f"got ({u.shape[-1]}, {l.shape[-1]})"
        )
    merged = u @ Tensor(upper_sel.T) + l @ Tensor(lower_sel.T)
    return merged.data if (plain_u and plain_l) else merged


def finite_difference(x, order: int):
    """Forward differences along the time axis (second-to-last axis).

    Order 1 returns x_{t+1} - x_t (length T-1); order 2 returns
    x_{t+2} - 2 x_{t+1} + x_t (length T-2).
    """
    if order not in (1, 2):
        raise ContractError(f"difference order must be 1 or 2, got {order}")
    t_axis_len = np.shape(x if not isinstance(x, Tensor) else x.data)[-2]
    if t_axis_len < order + 1:
        raise ShapeError(f"need at least {order + 1} frames for order {order}, got {t_axis_len}")
    xt, plain = _wrap(x)
    ax = xt.ndim - 2
    if order == 1:
        out = T.narrow(xt, ax, 1, t_axis_len - 1) - T.narrow(xt, ax, 0, t_axis_len - 1)
    else:
        out = (
            T.narrow(xt, ax, 2, t_axis_len - 2)
            - T.narrow(xt, ax, 1, t_axis_len - 2) * 2.0
            + T.narrow(xt, ax, 0, t_axis_len - 2)
        )
    return out.data if plain else out


# ---------------------------------------------------------------------------
# Motion file format: plain text, '#'-prefixed header, one frame per line.

MOTION_FORMAT = "dancegen-motion"
MOTION_VERSION = 1


def write_motion_file(path, motion: MotionSequence) -> None:
    frames = motion.frames
    with open(path, "w") as fh:
        fh.write(f"#format {MOTION_FORMAT} v{MOTION_VERSION}\n")
        fh.write(f"#fps {motion.fps}\n")
        fh.write(f"#joint_count {JOINT_COUNT}\n")
        fh.write(f"#frame_count {frames.shape[0]}\n")
        for row in frames:
            fh.write(" ".join(repr(float(v)) for v in row))
            fh.write("\n")


def _header_and_rows(path, expected_format, expected_version):
    with open(path) as fh:
        lines = fh.read().splitlines()
    header = {}
    body_start = len(lines)
    for i, line in enumerate(lines):
        if not line.startswith("#"):
            body_start = i
            break
        parts = line[1:].split(maxsplit=1)
        if len(parts) != 2:
            raise FormatError(f"{path}: line {i + 1}: malformed header entry {line!r}")
        header[parts[0]] = parts[1]
    fmt = header.get("format", "<missing>")
    expected = f"{expected_format} v{expected_version}"
    if fmt.split()[0] != expected_format:
        raise FormatError(f"{path}: expected a {expected_format!r} file, found {fmt!r}")
    if fmt != expected:
        raise FormatError(f"{path}: unsupported version {fmt!r}; this reader handles {expected!r}")
    return header, lines[body_start:], body_start


def _parse_float_rows(path, rows, first_line, width, count):
    data = np.empty((count, width))
    if len(rows) != count:
        raise FormatError(f"{path}: header promises {count} rows, file has {len(rows)}")
    for i, row in enumerate(rows):
        fields = row.split()
        if len(fields) != width:
            raise FormatError(
                f"{path}: line {first_line + i + 1}: expected {width} fields, got {len(fields)}"
            )
        try:
            data[i] = [float(f) for f in fields]
        except ValueError as e:
            raise FormatError(f"{path}: line {first_line + i + 1}: {e}") from None
    return data


def read_motion_file(path) -> MotionSequence:
    header, rows, body_start = _header_and_rows(path, MOTION_FORMAT, MOTION_VERSION)
    try:
        fps = int(header["fps"])
        joints = int(header["joint_count"])
        count = int(header["frame_count"])
    except (KeyError, ValueError) as e:
        raise FormatError(f"{path}: bad or missing header field: {e}") from None
    if fps != FPS:
        raise FormatError(f"{path}: fps {fps} unsupported, expected {FPS}")
    if joints != JOINT_COUNT:
        raise FormatError(f"{path}: joint_count {joints} unsupported, expected {JOINT_COUNT}")
    frames = _parse_float_rows(path, rows, body_start, FRAME_WIDTH, count)
    return MotionSequence(frames)
