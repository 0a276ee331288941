"""Analytic grasp-lift environment.

A palm (directly driven in task space) carries planar serial-chain fingers
over a table; the task is to touch a tabletop object with thumb plus at
least one opposing finger, hold contact for a few control steps (which
latches a rigid grasp), and carry the object to a lifted goal position.

The physics is deliberately simple: first-order joint tracking, penalty
contact forces on fingertips, a latch instead of friction, gravity only for
the free object.  Every observation and reward interface of a contact-rich
simulator is preserved, and morphology (link lengths, tracking gains, DoF
masks) shapes the dynamics, so policies must still adapt per embodiment.

Control runs at 10 Hz (dt = 0.05 s).  All state arrays are float64;
observations are emitted as float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .morphology import ACTION_DIMS, ARM_DIMS, FINGER_DIMS, FINGER_ORDER, Morphology

# ---------------------------------------------------------------------------
# quaternion helpers, (w, x, y, z) convention
# ---------------------------------------------------------------------------

QUAT_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    n = np.linalg.norm(q)
    if n < eps:
        return QUAT_IDENTITY.copy()
    q = q / n
    return -q if q[0] < 0 else q


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def mat_to_quat(m: np.ndarray) -> np.ndarray:
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(1.0 + m[i, i] - m[j, j] - m[k, k], 0.0)) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    return quat_normalize(q)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return quat_to_mat(q) @ v


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-12 or angle == 0.0:
        return QUAT_IDENTITY.copy()
    half = 0.5 * angle
    return np.concatenate(([math.cos(half)], math.sin(half) * axis / n))


def quat_rotation_vector(q_new: np.ndarray, q_old: np.ndarray) -> np.ndarray:
    """Axis * angle of the rotation taking q_old to q_new (world frame)."""
    rel = quat_mul(q_new, quat_conj(q_old))
    rel = quat_normalize(rel)
    vec = rel[1:]
    s = np.linalg.norm(vec)
    if s < 1e-12:
        return np.zeros(3)
    angle = 2.0 * math.atan2(s, rel[0])
    return vec / s * angle


# ---------------------------------------------------------------------------
# configuration and object specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvConfig:
    """Environment constants; reward coefficients follow the shaping table."""

    dt: float = 0.05                       # 10 Hz control
    episode_cap: int = 200
    table_z: float = 0.0
    workspace_xy: float = 0.10
    gravity: float = 9.81
    arm_step_max: float = 0.02             # metres per step, translation norm
    contact_radius: float = 0.02           # penalty shell around surfaces
    contact_stiffness: float = 400.0       # N / m
    attach_steps: int = 3
    detach_steps: int = 3
    success_radius: float = 0.05
    goal_height_range: tuple = (0.2, 0.4)  # above the table
    goal_min_separation: float = 0.2
    goal_xy_jitter: float = 0.05
    palm_start_offset: tuple = (-0.05, 0.035, 0.14)
    palm_start_jitter: float = 0.02
    # reward coefficients
    w_action: float = 0.005
    w_action_rate: float = 0.005
    w_approach: float = 2.0
    w_contact_any: float = 0.8
    w_contact_grasp: float = 2.0
    w_track_held: float = 14.0
    w_track_goal: float = 20.0
    sigma_approach: float = 0.1            # never pinned by the shaping table
    sigma_track_held: float = 0.2
    sigma_track_goal: float = 0.1
    force_threshold: float = 1.0


DEFAULT_ENV_CONFIG = EnvConfig()

SURFACE_POINTS = 64                        # 64 x 3 = pointcloud block width


@dataclass(frozen=True)
class ObjectSpec:
    """Graspable object: analytic surface plus a fixed surface point set."""

    shape: str                             # "sphere" | "box"
    size: float                            # radius / half-edge, metres
    mass: float
    surface_points: np.ndarray             # (64, 3) in object frame
    name: str = ""

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise ValueError(f"unknown object shape {self.shape!r}")
        if self.surface_points.shape != (SURFACE_POINTS, 3):
            raise ValueError(f"surface point set must be ({SURFACE_POINTS}, 3)")


def _fibonacci_sphere(n: int, radius: float) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return radius * np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _box_surface(n: int, half: float) -> np.ndarray:
    # Deterministic low-discrepancy spread over the six faces.
    rng = np.random.default_rng(np.random.SeedSequence(entropy=987654321))
    face = np.arange(n) % 6
    uv = rng.uniform(-1.0, 1.0, size=(n, 2)) * half
    pts = np.zeros((n, 3))
    for k in range(n):
        axis = face[k] // 2
        sign = 1.0 if face[k] % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[k, axis] = sign * half
        pts[k, others[0]] = uv[k, 0]
        pts[k, others[1]] = uv[k, 1]
    return pts


def make_object(shape: str, size: float, mass: float, name: str = "") -> ObjectSpec:
    points = (_fibonacci_sphere(SURFACE_POINTS, size) if shape == "sphere"
              else _box_surface(SURFACE_POINTS, size))
    return ObjectSpec(shape=shape, size=size, mass=mass,
                      surface_points=points, name=name or f"{shape}-{size:g}")


def default_object_set() -> tuple:
    """Ten training objects: six spheres and four boxes of varied size/mass."""
    objs = []
    for i, r in enumerate((0.030, 0.034, 0.038, 0.040, 0.042, 0.045)):
        objs.append(make_object("sphere", r, 0.05 + 0.02 * i, f"sphere-{i}"))
    for i, h in enumerate((0.030, 0.035, 0.040, 0.044)):
        objs.append(make_object("box", h, 0.06 + 0.02 * i, f"box-{i}"))
    return tuple(objs)


# ---------------------------------------------------------------------------
# ADR: performance-driven observation/physics noise schedule
# ---------------------------------------------------------------------------

ADR_MAX_LEVEL = 10
ADR_WINDOW = 32
ADR_UP_THRESHOLD = 0.8
ADR_DOWN_THRESHOLD = 0.4

# Per-channel noise at the top difficulty level.
ADR_MAX_SCALES = {
    "joint_pos": 0.05,     # rad, on the 27 joint-position dims
    "joint_vel": 0.2,      # rad/s
    "fingertip_pos": 0.01,  # m, on tracked-body position components
    "pointcloud": 0.01,    # m
    "gravity_span": 0.1,   # multiplier range half-width at level 10
}


@dataclass(frozen=True)
class AdrState:
    """Difficulty level in [0, 10] driven by a rolling success window."""

    level: int = 0
    recent: tuple = ()

    @property
    def rolling_success(self) -> float:
        return float(np.mean(self.recent)) if self.recent else 0.0

    def noise_scale(self, channel: str) -> float:
        return ADR_MAX_SCALES[channel] * self.level / ADR_MAX_LEVEL

    def gravity_multiplier(self, rng: np.random.Generator) -> float:
        span = self.noise_scale("gravity_span")
        if span == 0.0:
            return 1.0
        return 1.0 + span * rng.uniform(-1.0, 1.0)


def adr_update(adr: AdrState, episode_success: bool) -> AdrState:
    """Record one episode outcome and move the level by at most one step."""
    recent = (adr.recent + (1 if episode_success else 0,))[-ADR_WINDOW:]
    rolling = float(np.mean(recent))
    level = adr.level
    if rolling > ADR_UP_THRESHOLD and level < ADR_MAX_LEVEL:
        level += 1
    elif rolling < ADR_DOWN_THRESHOLD and level > 0:
        level -= 1
    return AdrState(level=level, recent=recent)


# ---------------------------------------------------------------------------
# environment state
# ---------------------------------------------------------------------------

NUM_BODIES = 6     # palm + five fingertips, in FINGER_ORDER after the palm


@dataclass
class EnvState:
    """Full simulator state.  Beyond the core pose fields this carries the
    bookkeeping the analytic model needs: free-fall velocity, the rigid
    grasp transform, pseudo-joint accumulators, and tracked-body velocities
    for the observation."""

    arm_pos: np.ndarray            # (3,)
    arm_quat: np.ndarray           # (4,)
    finger_q: np.ndarray           # (20,)
    finger_qd: np.ndarray          # (20,)
    arm_q_equiv: np.ndarray        # (7,) accumulated translation + current quat
    arm_qd_equiv: np.ndarray       # (7,)
    object_pos: np.ndarray         # (3,)
    object_quat: np.ndarray        # (4,)
    object_vel: np.ndarray         # (3,)
    goal_pos: np.ndarray           # (3,)
    goal_quat: np.ndarray          # (4,)
    attached: bool
    attach_counter: int
    detach_counter: int
    attach_rel_pos: np.ndarray     # (3,) object in palm frame at latch time
    attach_rel_quat: np.ndarray    # (4,)
    step_count: int
    prev_action: np.ndarray        # (27,)
    body_vel: np.ndarray           # (6, 6) linear + angular per tracked body


@dataclass(frozen=True)
class RewardBreakdown:
    """The five shaping terms plus contact indicators; total is their sum."""

    action_penalty: float
    approach: float
    contact: float
    held_tracking: float
    goal_tracking: float
    contact_any: bool
    contact_grasp: bool
    total: float


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------

def forward_kinematics(morph: Morphology, arm_pos: np.ndarray,
                       arm_quat: np.ndarray, finger_q: np.ndarray) -> np.ndarray:
    """Palm and fingertip frames, (6, 7) rows of [position, quaternion].

    Each finger is a planar chain in an abduction-rotated vertical plane of
    the palm frame: slot 0 swings the chain around the palm normal, slots
    1..3 curl it toward the normal.  Fingers the morphology lacks report the
    palm frame itself.
    """
    finger_q = np.asarray(finger_q, dtype=np.float64)
    if finger_q.shape != (FINGER_DIMS,):
        raise ValueError(f"finger_q must be ({FINGER_DIMS},), got {finger_q.shape}")
    arch = morph.archetype
    rot = quat_to_mat(arm_quat)
    frames = np.empty((NUM_BODIES, 7))
    frames[0, :3] = arm_pos
    frames[0, 3:] = arm_quat
    normal = np.array([0.0, 0.0, 1.0])                      # palm frame +z
    for fi, fname in enumerate(FINGER_ORDER):
        row = fi + 1
        if fname not in arch.fingers_present:
            frames[row, :3] = arm_pos
            frames[row, 3:] = arm_quat
            continue
        q_abd, q1, q2, q3 = finger_q[4 * fi:4 * fi + 4]
        lengths = morph.link_lengths[fi]
        ca, sa = math.cos(q_abd), math.sin(q_abd)
        bx, by, _ = arch.base_dirs[fi]
        u = np.array([ca * bx - sa * by, sa * bx + ca * by, 0.0])
        pos = arch.mount_dirs[fi] * lengths[0]
        phi = 0.0
        for seg, dq in enumerate((q1, q2, q3)):
            phi += dq
            pos = pos + lengths[seg + 1] * (math.cos(phi) * u + math.sin(phi) * normal)
        x_axis = math.cos(phi) * u + math.sin(phi) * normal
        y_axis = np.cross(normal, u)
        z_axis = np.cross(x_axis, y_axis)
        local = np.column_stack([x_axis, y_axis, z_axis])
        frames[row, :3] = arm_pos + rot @ pos
        frames[row, 3:] = quat_mul(arm_quat, mat_to_quat(local))
    return frames


def _surface_gap_and_normal(point: np.ndarray, obj: ObjectSpec,
                            obj_pos: np.ndarray, obj_quat: np.ndarray):
    """Signed distance from a world point to the object surface (negative
    inside) and the outward surface normal in world frame."""
    rot = quat_to_mat(obj_quat)
    local = rot.T @ (point - obj_pos)
    if obj.shape == "sphere":
        dist = np.linalg.norm(local)
        gap = dist - obj.size
        n_local = local / dist if dist > 1e-9 else np.array([0.0, 0.0, 1.0])
    else:
        h = obj.size
        q = np.abs(local) - h
        outside = np.maximum(q, 0.0)
        out_d = np.linalg.norm(outside)
        if out_d > 0.0:
            gap = out_d
            n_local = np.sign(local) * outside / out_d
        else:
            axis = int(np.argmax(q))
            gap = q[axis]
            n_local = np.zeros(3)
            n_local[axis] = np.sign(local[axis]) or 1.0
    return gap, rot @ n_local


def contact_forces(state: EnvState, morph: Morphology, obj: ObjectSpec,
                   cfg: EnvConfig = DEFAULT_ENV_CONFIG,
                   frames: np.ndarray | None = None) -> np.ndarray:
    """Penalty force on each of the five fingertips, (5, 3) newtons.

    Force turns on inside a shell of ``contact_radius`` around the surface:
    magnitude stiffness * (contact_radius - gap), direction the outward
    surface normal.  Absent fingers report zero.
    """
    if frames is None:
        frames = forward_kinematics(morph, state.arm_pos, state.arm_quat, state.finger_q)
    forces = np.zeros((5, 3))
    present = morph.archetype.fingers_present
    for fi, fname in enumerate(FINGER_ORDER):
        if fname not in present:
            continue
        gap, normal = _surface_gap_and_normal(frames[fi + 1, :3], obj,
                                              state.object_pos, state.object_quat)
        depth = cfg.contact_radius - gap
        if depth > 0.0:
            forces[fi] = cfg.contact_stiffness * depth * normal
    return forces


# ---------------------------------------------------------------------------
# reward
# ---------------------------------------------------------------------------

def contact_indicators(force_norms, threshold: float = 1.0) -> tuple[bool, bool]:
    """(any-finger, thumb-plus-opposition) indicators over the norms of the
    thumb, index, middle, and ring fingertip forces."""
    thumb, index, middle, ring = (float(f) > threshold for f in force_norms)
    any_contact = thumb or index or middle or ring
    grasp = thumb and (index or middle or ring)
    return any_contact, grasp


def reward_terms(action: np.ndarray, prev_action: np.ndarray,
                 body_positions: np.ndarray, force_norms: np.ndarray,
                 object_pos: np.ndarray, goal_pos: np.ndarray,
                 cfg: EnvConfig = DEFAULT_ENV_CONFIG) -> RewardBreakdown:
    """Shaping terms from precomputed kinematic quantities.

    ``body_positions`` are the six tracked body positions, ``force_norms``
    the thumb/index/middle/ring fingertip force magnitudes.
    """
    action = np.asarray(action, dtype=np.float64)
    prev_action = np.asarray(prev_action, dtype=np.float64)
    if action.shape != (ACTION_DIMS,) or prev_action.shape != (ACTION_DIMS,):
        raise ValueError(f"actions must be ({ACTION_DIMS},)")

    action_penalty = (-cfg.w_action * float(np.sum(action ** 2))
                      - cfg.w_action_rate * float(np.sum((action - prev_action) ** 2)))

    worst = float(np.max(np.linalg.norm(body_positions - object_pos, axis=1)))
    approach = cfg.w_approach * (1.0 - math.tanh(worst / cfg.sigma_approach))

    contact_any, contact_grasp = contact_indicators(force_norms, cfg.force_threshold)
    contact = cfg.w_contact_any * contact_any + cfg.w_contact_grasp * contact_grasp

    goal_dist = float(np.linalg.norm(object_pos - goal_pos))
    held = cfg.w_track_held * (1.0 - math.tanh(goal_dist / cfg.sigma_track_held)) \
        * (1.0 if contact_grasp else 0.0)
    goal = cfg.w_track_goal * (1.0 - math.tanh(goal_dist / cfg.sigma_track_goal)) ** 2

    total = action_penalty + approach + contact + held + goal
    return RewardBreakdown(
        action_penalty=action_penalty, approach=approach, contact=contact,
        held_tracking=held, goal_tracking=goal,
        contact_any=contact_any, contact_grasp=contact_grasp, total=total)


def compute_reward(state: EnvState, next_state: EnvState, action: np.ndarray,
                   prev_action: np.ndarray, morph: Morphology, obj: ObjectSpec,
                   cfg: EnvConfig = DEFAULT_ENV_CONFIG,
                   frames: np.ndarray | None = None,
                   forces: np.ndarray | None = None) -> RewardBreakdown:
    """Step reward: kinematic terms evaluate on the post-step state."""
    if frames is None:
        frames = forward_kinematics(morph, next_state.arm_pos, next_state.arm_quat,
                                    next_state.finger_q)
    if forces is None:
        forces = contact_forces(next_state, morph, obj, cfg, frames=frames)
    force_norms = np.linalg.norm(forces[:4], axis=1)
    return reward_terms(action, prev_action, frames[:, :3], force_norms,
                        next_state.object_pos, next_state.goal_pos, cfg)


# ---------------------------------------------------------------------------
# episode protocol
# ---------------------------------------------------------------------------

def success_check(state: EnvState, cfg: EnvConfig = DEFAULT_ENV_CONFIG) -> bool:
    """Position-only goal test: object within ``success_radius`` of the goal."""
    return float(np.linalg.norm(state.goal_pos - state.object_pos)) < cfg.success_radius


def reset(morph: Morphology, obj: ObjectSpec, seed: int,
          cfg: EnvConfig = DEFAULT_ENV_CONFIG,
          adr: AdrState | None = None) -> tuple[EnvState, np.ndarray]:
    """Seed-deterministic episode start: object on the table, goal lifted at
    least ``goal_min_separation`` above it, palm hovering near the object."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed) & (2 ** 63 - 1),
                                                       spawn_key=(11,)))
    obj_xy = rng.uniform(-cfg.workspace_xy, cfg.workspace_xy, size=2)
    obj_z = cfg.table_z + obj.size
    object_pos = np.array([obj_xy[0], obj_xy[1], obj_z])

    goal_xy = obj_xy + rng.uniform(-cfg.goal_xy_jitter, cfg.goal_xy_jitter, size=2)
    lo = max(cfg.goal_height_range[0], (obj_z - cfg.table_z) + cfg.goal_min_separation)
    goal_z = cfg.table_z + rng.uniform(lo, max(cfg.goal_height_range[1], lo + 1e-6))
    goal_pos = np.array([goal_xy[0], goal_xy[1], goal_z])

    palm_pos = object_pos + np.asarray(cfg.palm_start_offset) \
        + rng.uniform(-cfg.palm_start_jitter, cfg.palm_start_jitter, size=3)
    yaw = rng.uniform(-0.1, 0.1)
    palm_quat = quat_normalize(quat_mul(
        quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw),
        np.array([0.0, 1.0, 0.0, 0.0])))       # palm normal points at the table

    arm_q_equiv = np.zeros(ARM_DIMS)
    arm_q_equiv[3:] = palm_quat

    state = EnvState(
        arm_pos=palm_pos, arm_quat=palm_quat,
        finger_q=np.zeros(FINGER_DIMS), finger_qd=np.zeros(FINGER_DIMS),
        arm_q_equiv=arm_q_equiv, arm_qd_equiv=np.zeros(ARM_DIMS),
        object_pos=object_pos, object_quat=QUAT_IDENTITY.copy(),
        object_vel=np.zeros(3),
        goal_pos=goal_pos, goal_quat=QUAT_IDENTITY.copy(),
        attached=False, attach_counter=0, detach_counter=0,
        attach_rel_pos=np.zeros(3), attach_rel_quat=QUAT_IDENTITY.copy(),
        step_count=0, prev_action=np.zeros(ACTION_DIMS),
        body_vel=np.zeros((NUM_BODIES, 6)),
    )
    obs_rng = np.random.default_rng(np.random.SeedSequence(
        entropy=int(seed) & (2 ** 63 - 1), spawn_key=(12,)))
    obs = assemble_observation(state, morph, obj, adr or AdrState(), obs_rng)
    return state, obs


def step(state: EnvState, canonical_action: np.ndarray, morph: Morphology,
         obj: ObjectSpec, adr: AdrState, rng: np.random.Generator,
         cfg: EnvConfig = DEFAULT_ENV_CONFIG):
    """Advance one control step.

    The 27-dim action is [20 finger joint targets, 3 palm translation,
    4 palm quaternion increment].  Finger smoothing is the caller's job;
    the action received here is what gets executed and recorded.
    Returns (next_state, observation, RewardBreakdown, done, info).
    """
    action = np.asarray(canonical_action, dtype=np.float64)
    if action.shape != (ACTION_DIMS,):
        raise ValueError(f"action must be ({ACTION_DIMS},), got {action.shape}")
    if not np.isfinite(action).all():
        raise ValueError("non-finite action")

    # --- arm: clipped translation + normalized quaternion increment
    delta = action[FINGER_DIMS:FINGER_DIMS + 3].copy()
    norm = np.linalg.norm(delta)
    if norm > cfg.arm_step_max:
        delta *= cfg.arm_step_max / norm
    arm_pos = state.arm_pos + delta

    dq = action[FINGER_DIMS + 3:]
    if np.linalg.norm(dq) < 1e-8:
        arm_quat = state.arm_quat.copy()
    else:
        arm_quat = quat_normalize(quat_mul(quat_normalize(dq), state.arm_quat))

    # --- fingers: first-order tracking toward targets, locked slots pinned
    limits = morph.archetype.joint_limits
    targets = action[:FINGER_DIMS]
    mask = morph.dof_mask
    qd = np.where(mask, morph.joint_gains * (targets - state.finger_q), 0.0)
    finger_q = np.clip(state.finger_q + qd * cfg.dt, limits[:, 0], limits[:, 1])
    finger_q = np.where(mask, finger_q, state.finger_q)
    finger_qd = (finger_q - state.finger_q) / cfg.dt

    # --- object: rigid ride while attached, gravity fall otherwise
    object_quat = state.object_quat.copy()
    object_vel = state.object_vel.copy()
    if state.attached:
        rot = quat_to_mat(arm_quat)
        object_pos = arm_pos + rot @ state.attach_rel_pos
        object_quat = quat_normalize(quat_mul(arm_quat, state.attach_rel_quat))
        object_vel = np.zeros(3)
    else:
        object_pos = state.object_pos.copy()
        rest_z = cfg.table_z + obj.size
        if object_pos[2] > rest_z or object_vel[2] != 0.0:
            g_mult = adr.gravity_multiplier(rng)
            object_vel = object_vel + np.array([0.0, 0.0, -cfg.gravity * g_mult * cfg.dt])
            object_pos = object_pos + object_vel * cfg.dt
            if object_pos[2] <= rest_z:
                object_pos[2] = rest_z
                object_vel = np.zeros(3)

    # --- pseudo-joints mirroring accumulated arm deltas
    arm_q_equiv = state.arm_q_equiv.copy()
    arm_q_equiv[:3] += delta
    arm_q_equiv[3:] = arm_quat
    arm_qd_equiv = (arm_q_equiv - state.arm_q_equiv) / cfg.dt

    next_state = replace(
        state,
        arm_pos=arm_pos, arm_quat=arm_quat,
        finger_q=finger_q, finger_qd=finger_qd,
        arm_q_equiv=arm_q_equiv, arm_qd_equiv=arm_qd_equiv,
        object_pos=object_pos, object_quat=object_quat, object_vel=object_vel,
        step_count=state.step_count + 1,
        prev_action=action.copy(),
    )

    # --- contacts and the grasp latch
    frames = forward_kinematics(morph, arm_pos, arm_quat, finger_q)
    old_frames = forward_kinematics(morph, state.arm_pos, state.arm_quat, state.finger_q)
    body_vel = np.empty((NUM_BODIES, 6))
    for b in range(NUM_BODIES):
        body_vel[b, :3] = (frames[b, :3] - old_frames[b, :3]) / cfg.dt
        body_vel[b, 3:] = quat_rotation_vector(frames[b, 3:], old_frames[b, 3:]) / cfg.dt
    next_state.body_vel = body_vel

    forces = contact_forces(next_state, morph, obj, cfg, frames=frames)
    _, grasp = contact_indicators(np.linalg.norm(forces[:4], axis=1), cfg.force_threshold)

    attached = state.attached
    attach_counter = state.attach_counter
    detach_counter = state.detach_counter
    if grasp:
        attach_counter += 1
        detach_counter = 0
        if not attached and attach_counter >= cfg.attach_steps:
            attached = True
            rot = quat_to_mat(arm_quat)
            next_state.attach_rel_pos = rot.T @ (object_pos - arm_pos)
            next_state.attach_rel_quat = quat_normalize(
                quat_mul(quat_conj(arm_quat), object_quat))
            next_state.object_vel = np.zeros(3)
    else:
        if attached:
            detach_counter += 1
            if detach_counter >= cfg.detach_steps:
                attached = False
                attach_counter = 0
                detach_counter = 0
                next_state.object_vel = np.zeros(3)
        else:
            attach_counter = 0
    next_state.attached = attached
    next_state.attach_counter = attach_counter
    next_state.detach_counter = detach_counter

    reward = compute_reward(state, next_state, action, state.prev_action,
                            morph, obj, cfg, frames=frames, forces=forces)
    success = success_check(next_state, cfg)
    done = success or next_state.step_count >= cfg.episode_cap
    obs = assemble_observation(next_state, morph, obj, adr, rng, frames=frames)
    info = {"success": success, "attached": attached,
            "goal_distance": float(np.linalg.norm(next_state.goal_pos
                                                  - next_state.object_pos))}
    return next_state, obs, reward, done, info


# ---------------------------------------------------------------------------
# observation
# ---------------------------------------------------------------------------

OBS_LAYOUT = (
    ("object_quat", 4),
    ("goal_pose", 7),
    ("prev_action", 27),
    ("joint_pos", 27),
    ("joint_vel", 27),
    ("body_states", 78),     # 6 bodies x [pos 3, quat 4, linvel 3, angvel 3]
    ("contact_forces", 15),
    ("pointcloud", 192),     # 64 surface points in world frame
)
OBS_DIMS = sum(width for _, width in OBS_LAYOUT)          # 377


def obs_offsets() -> dict[str, tuple[int, int]]:
    out, start = {}, 0
    for name, width in OBS_LAYOUT:
        out[name] = (start, start + width)
        start += width
    return out


OBS_OFFSETS = obs_offsets()


def assemble_observation(state: EnvState, morph: Morphology, obj: ObjectSpec,
                         adr: AdrState, rng: np.random.Generator,
                         frames: np.ndarray | None = None) -> np.ndarray:
    """The 377-dim observation in the fixed component order, float32.

    ADR adds zero-mean Gaussian noise to joint positions/velocities, tracked
    body positions, and the pointcloud; all scales are exactly zero at level
    zero, so no RNG is consumed there.
    """
    if frames is None:
        frames = forward_kinematics(morph, state.arm_pos, state.arm_quat, state.finger_q)

    joint_pos = np.concatenate([state.finger_q, state.arm_q_equiv])
    joint_vel = np.concatenate([state.finger_qd, state.arm_qd_equiv])
    body = np.concatenate([frames, state.body_vel], axis=1)     # (6, 13)
    forces = contact_forces(state, morph, obj, DEFAULT_ENV_CONFIG, frames=frames)
    cloud = state.object_pos + obj.surface_points @ quat_to_mat(state.object_quat).T

    if adr.level > 0:
        joint_pos = joint_pos + rng.normal(0.0, adr.noise_scale("joint_pos"), 27)
        joint_vel = joint_vel + rng.normal(0.0, adr.noise_scale("joint_vel"), 27)
        body = body.copy()
        body[:, :3] += rng.normal(0.0, adr.noise_scale("fingertip_pos"), (NUM_BODIES, 3))
        cloud = cloud + rng.normal(0.0, adr.noise_scale("pointcloud"), cloud.shape)

    obs = np.concatenate([
        state.object_quat,
        state.goal_pos, state.goal_quat,
        state.prev_action,
        joint_pos,
        joint_vel,
        body.ravel(),
        forces.ravel(),
        cloud.ravel(),
    ]).astype(np.float32)
    assert obs.shape == (OBS_DIMS,)
    return obs
