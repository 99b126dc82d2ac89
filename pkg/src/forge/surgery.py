"""Checkpoint archives and the three-step weight-selection pipeline.

Selection proceeds exactly as: (1) pick which teacher blocks feed which
student blocks, (2) map every student tensor to its teacher counterpart
one-to-one, (3) pick element indices per *semantic dimension* so that every
tensor touching the same width ends up sliced by one identical index list.

Four element-selection strategies are provided (uniform, consecutive,
random with and without index consistency), and ``dual_plans`` derives a
complementary pair of plans so two students can be initialized from
different regions of the same teacher.

Archive format ``NTA1`` (all integers little-endian):

    magic ``NTA1`` | u32 entry count | entries...
    entry: u16 name length | name (UTF-8) | u8 rank | rank x u64 dims |
           f32 payload, row-major

The classifier head is never selected from the teacher (the downstream
task has its own class count); it is freshly initialized instead.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    FormatError,
    IncompatibilityError,
    MappingError,
    PlanIntegrityError,
)
from .models import ModelSpec, Parameters, init_head, shape_table
from .rng import substream
from .tensor import Tensor

MAGIC = b"NTA1"

STRATEGIES = ("uniform", "consecutive", "random_consistent", "random_inconsistent")


# ---------------------------------------------------------------------------
# archive io


def write_archive(params: Parameters, path) -> None:
    """Serialize named tensors; round-trips bit-exactly."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", len(params))
    for name, t in params.items():
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<Q", dim)
        blob += arr.tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


def read_archive(path) -> Parameters:
    """Parse an NTA1 file; any defect raises FormatError with its offset."""
    with open(path, "rb") as f:
        blob = f.read()
    return parse_archive(blob)


def parse_archive(blob: bytes) -> Parameters:
    off = 0

    def need(n, what):
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"truncated while reading {what}", off)
        piece = blob[off : off + n]
        off += n
        return piece

    if need(4, "magic") != MAGIC:
        raise FormatError(f"bad magic, expected {MAGIC!r}", 0)
    (count,) = struct.unpack("<I", need(4, "entry count"))
    params: Parameters = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", need(2, f"entry {i} name length"))
        raw = need(name_len, f"entry {i} name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"entry {i} name is not valid UTF-8", off - name_len)
        if name in params:
            raise FormatError(f"duplicate tensor name {name!r}", off - name_len)
        (rank,) = struct.unpack("<B", need(1, f"{name} rank"))
        shape = []
        for d in range(rank):
            (dim,) = struct.unpack("<Q", need(8, f"{name} dim {d}"))
            shape.append(dim)
        n_elems = 1
        for dim in shape:
            n_elems *= dim
        payload_bytes = n_elems * 4
        if off + payload_bytes > len(blob):
            raise FormatError(
                f"truncated payload for {name!r}: shape {tuple(shape)} needs "
                f"{payload_bytes} bytes",
                off,
            )
        arr = np.frombuffer(blob, dtype="<f4", count=n_elems, offset=off).reshape(shape)
        off += payload_bytes
        params[name] = Tensor(arr.copy())
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after last entry", off)
    return params


# ---------------------------------------------------------------------------
# selection strategies and plans


@dataclass
class SelectionStrategy:
    kind: str
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise IncompatibilityError(
                f"unknown strategy {self.kind!r}; options: {STRATEGIES}"
            )
        if self.kind.startswith("random") and self.seed is None:
            raise IncompatibilityError(f"strategy {self.kind!r} requires a seed")


@dataclass
class PlanEntry:
    teacher_name: str
    axes: list  # per axis: "all" or a strictly increasing list of ints


SelectionPlan = dict  # student tensor name -> PlanEntry


@dataclass(frozen=True)
class _AxisSem:
    """How one tensor axis relates to the model's semantic widths."""

    mode: str  # "all" | "sem"
    label: str = ""
    blocks: int = 1  # >1 for stacked groups (fused qkv, merge concat)


def _axis_semantics(spec: ModelSpec, name: str, shape: tuple) -> list:
    """Per-axis semantics of a tensor under the canonical name grammar."""

    def emb(i):
        return _AxisSem("sem", f"embed{i}")

    def hid(i):
        return _AxisSem("sem", f"hidden{i}")

    if name == "embed.weight":
        return [emb(0), _AxisSem("all")]
    if name == "embed.bias":
        return [emb(0)]
    if name == "pos":
        return [_AxisSem("all"), emb(0)]
    if name in ("head.weight", "head.bias"):
        raise MappingError("classifier head is never selected from the teacher")
    parts = name.split(".")
    stage = int(parts[0].removeprefix("stage"))
    if parts[1] == "down":
        prev = _AxisSem("sem", f"embed{stage - 1}", blocks=4)
        return [emb(stage), prev] if parts[2] == "weight" else [emb(stage)]
    comp = ".".join(parts[2:])
    table = {
        "norm1.weight": [emb(stage)],
        "norm1.bias": [emb(stage)],
        "norm2.weight": [emb(stage)],
        "norm2.bias": [emb(stage)],
        "norm.weight": [emb(stage)],
        "norm.bias": [emb(stage)],
        "attn.qkv.weight": [_AxisSem("sem", f"embed{stage}", blocks=3), emb(stage)],
        "attn.qkv.bias": [_AxisSem("sem", f"embed{stage}", blocks=3)],
        "attn.proj.weight": [emb(stage), emb(stage)],
        "attn.proj.bias": [emb(stage)],
        "dw.weight": [emb(stage), _AxisSem("all"), _AxisSem("all")],
        "dw.bias": [emb(stage)],
        "mlp.fc1.weight": [hid(stage), emb(stage)],
        "mlp.fc1.bias": [hid(stage)],
        "mlp.fc2.weight": [emb(stage), hid(stage)],
        "mlp.fc2.bias": [emb(stage)],
    }
    if comp not in table:
        raise MappingError(f"tensor {name!r} is outside the canonical name grammar")
    sems = table[comp]
    if len(sems) != len(shape):
        raise MappingError(f"{name!r}: rank {len(shape)} does not fit its component")
    return sems


# ---------------------------------------------------------------------------
# step 1: layer selection


def select_layers(teacher: ModelSpec, student: ModelSpec) -> dict:
    """(stage, student block) -> teacher block, taking the first N per stage."""
    teacher.validate()
    student.validate()
    if teacher.family != student.family:
        raise IncompatibilityError(
            f"family mismatch: teacher {teacher.family}, student {student.family}"
        )
    if len(student.stage_depths) != len(teacher.stage_depths):
        raise IncompatibilityError(
            f"stage count mismatch: teacher {len(teacher.stage_depths)}, "
            f"student {len(student.stage_depths)}"
        )
    mapping = {}
    for i, (td, sd) in enumerate(zip(teacher.stage_depths, student.stage_depths)):
        if sd > td:
            raise IncompatibilityError(
                f"student deeper than teacher at stage {i}: {sd} > {td}"
            )
        for j in range(sd):
            mapping[(i, j)] = j
    for ts, ss in zip(teacher.stage_dims, student.stage_dims):
        if ss > ts:
            raise IncompatibilityError(
                f"student wider than teacher: {student.stage_dims} vs {teacher.stage_dims}"
            )
    return mapping


# ---------------------------------------------------------------------------
# step 2: component mapping


def _rename_block(name: str, layer_map: dict) -> str:
    parts = name.split(".")
    if not parts[0].startswith("stage") or not parts[1].startswith("block"):
        return name
    stage = int(parts[0].removeprefix("stage"))
    block = int(parts[1].removeprefix("block"))
    teacher_block = layer_map[(stage, block)]
    return ".".join([parts[0], f"block{teacher_block}"] + parts[2:])


def map_components(layer_map: dict, teacher: Parameters, student_names) -> dict:
    """Student tensor name -> teacher tensor name (head excluded)."""
    mapping = {}
    for name in student_names:
        if name.startswith("head."):
            continue
        target = _rename_block(name, layer_map)
        if target not in teacher:
            raise MappingError(f"no teacher counterpart for {name!r} (wanted {target!r})")
        mapping[name] = target
    return mapping


# ---------------------------------------------------------------------------
# step 3: element selection


def strategy_indices(kind, width_teacher, width_student, offset, rng=None):
    """Index list for one semantic dimension; None means take everything.

    uniform strides the teacher width evenly starting at ``offset``;
    consecutive takes the ``offset``-th contiguous window (clamped to stay
    in range); the random variants sample without replacement, the second
    draw preferring the complement of the first so dual plans diverge.
    """
    if width_student > width_teacher:
        raise IncompatibilityError(
            f"student width {width_student} exceeds teacher width {width_teacher}"
        )
    if width_student == width_teacher:
        return None
    if kind == "uniform":
        return [offset + (i * width_teacher) // width_student for i in range(width_student)]
    if kind == "consecutive":
        start = min(offset * width_student, width_teacher - width_student)
        return list(range(start, start + width_student))
    # random variants
    first = sorted(rng.choice(width_teacher, size=width_student, replace=False).tolist())
    if offset == 0:
        return first
    complement = sorted(set(range(width_teacher)) - set(first))
    if len(complement) >= width_student:
        second = sorted(
            rng.choice(len(complement), size=width_student, replace=False).tolist()
        )
        return [complement[i] for i in second]
    extra = rng.choice(width_student, size=width_student - len(complement), replace=False)
    merged = sorted(complement + [first[i] for i in extra.tolist()])
    return merged


def _materialize_axis(sem: _AxisSem, base, teacher_extent: int, student_extent: int):
    """Expand a semantic index list across an axis's stacked blocks."""
    if sem.mode == "all" or base is None:
        return "all"
    block_w = teacher_extent // sem.blocks
    out = []
    for b in range(sem.blocks):
        out.extend(i + b * block_w for i in base)
    return out


def select_elements(
    component_map: dict,
    teacher: Parameters,
    student: ModelSpec,
    strategy: SelectionStrategy,
    offset: int,
) -> SelectionPlan:
    """Build the full per-tensor, per-axis index plan for one student."""
    if offset not in (0, 1):
        raise IncompatibilityError(f"offset must be 0 or 1, got {offset}")
    student_shapes = {name: shape for name, shape, _ in shape_table(student)}
    seed = strategy.seed if strategy.seed is not None else 0
    sem_cache: dict = {}  # label -> (w_t, w_s, index list)
    plan: SelectionPlan = {}
    for name, teacher_name in component_map.items():
        s_shape = student_shapes[name]
        t_shape = teacher[teacher_name].data.shape
        sems = _axis_semantics(student, name, s_shape)
        axes = []
        for axis, sem in enumerate(sems):
            t_ext, s_ext = t_shape[axis], s_shape[axis]
            if sem.mode == "all":
                if t_ext != s_ext:
                    raise IncompatibilityError(
                        f"{name!r} axis {axis} has fixed semantics but extents "
                        f"differ: {t_ext} vs {s_ext}"
                    )
                axes.append("all")
                continue
            if t_ext % sem.blocks or s_ext % sem.blocks:
                raise IncompatibilityError(
                    f"{name!r} axis {axis}: extents {t_ext}/{s_ext} not divisible "
                    f"into {sem.blocks} groups"
                )
            w_t, w_s = t_ext // sem.blocks, s_ext // sem.blocks
            if strategy.kind == "random_inconsistent":
                # fresh draw per tensor-axis; offset 1 takes the complement
                # of that axis's own offset-0 draw, so the rng label must
                # not depend on the offset
                rng = substream(seed, f"axis:{name}:{axis}")
                base = strategy_indices(strategy.kind, w_t, w_s, offset, rng)
            else:
                if sem.label in sem_cache:
                    cached_wt, cached_ws, base = sem_cache[sem.label]
                    if (cached_wt, cached_ws) != (w_t, w_s):
                        raise IncompatibilityError(
                            f"semantic dimension {sem.label!r} seen with widths "
                            f"{cached_wt}->{cached_ws} and {w_t}->{w_s}"
                        )
                else:
                    rng = substream(seed, f"sem:{sem.label}")
                    base = strategy_indices(strategy.kind, w_t, w_s, offset, rng)
                    sem_cache[sem.label] = (w_t, w_s, base)
            axes.append(_materialize_axis(sem, base, t_ext, s_ext))
        plan[name] = PlanEntry(teacher_name, axes)
    return plan


def validate_plan(plan: SelectionPlan, teacher: Parameters, student: ModelSpec) -> None:
    """Check the SelectionPlan invariants against both shape tables."""
    student_shapes = {name: shape for name, shape, _ in shape_table(student)}
    for name, entry in plan.items():
        if name not in student_shapes:
            raise PlanIntegrityError(f"plan covers unknown student tensor {name!r}")
        if entry.teacher_name not in teacher:
            raise PlanIntegrityError(f"plan references missing teacher tensor {entry.teacher_name!r}")
        t_shape = teacher[entry.teacher_name].data.shape
        s_shape = student_shapes[name]
        if len(entry.axes) != len(t_shape):
            raise PlanIntegrityError(f"{name!r}: {len(entry.axes)} axes for rank {len(t_shape)}")
        for axis, idx in enumerate(entry.axes):
            if idx == "all":
                if t_shape[axis] != s_shape[axis]:
                    raise PlanIntegrityError(
                        f"{name!r} axis {axis}: 'all' but extents differ "
                        f"({t_shape[axis]} vs {s_shape[axis]})"
                    )
                continue
            if len(idx) != s_shape[axis]:
                raise PlanIntegrityError(
                    f"{name!r} axis {axis}: {len(idx)} indices for extent {s_shape[axis]}"
                )
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise PlanIntegrityError(f"{name!r} axis {axis}: indices not strictly increasing")
            if idx[0] < 0 or idx[-1] >= t_shape[axis]:
                raise PlanIntegrityError(
                    f"{name!r} axis {axis}: index {idx[-1]} outside teacher extent {t_shape[axis]}"
                )


def dual_plans(
    teacher: Parameters,
    teacher_spec: ModelSpec,
    student_spec: ModelSpec,
    strategy,
    seed: int = 0,
) -> tuple:
    """Complementary plan pair: offsets 0/1 (or draws A/complement-of-A).

    The two plans are disjoint per semantic dimension whenever the width
    ratio is at least 2, and differ whenever any width actually shrinks;
    with fully equal specs both degenerate to the identity plan.
    """
    if isinstance(strategy, str):
        strategy = SelectionStrategy(strategy, seed)
    elif strategy.seed is None:
        strategy = SelectionStrategy(strategy.kind, seed)
    layer_map = select_layers(teacher_spec, student_spec)
    names = [name for name, _, _ in shape_table(student_spec)]
    component_map = map_components(layer_map, teacher, names)
    plan_main = select_elements(component_map, teacher, student_spec, strategy, offset=0)
    plan_aux = select_elements(component_map, teacher, student_spec, strategy, offset=1)
    return plan_main, plan_aux


def apply_plan(
    teacher: Parameters, plan: SelectionPlan, student: ModelSpec, head_seed: int = 0
) -> Parameters:
    """Gather student tensors out of the teacher; head gets a fresh init."""
    validate_plan(plan, teacher, student)
    params: Parameters = {}
    for name, shape, _kind in shape_table(student):
        if name.startswith("head."):
            params[name] = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
            continue
        if name not in plan:
            raise PlanIntegrityError(f"plan is missing student tensor {name!r}")
        entry = plan[name]
        arr = teacher[entry.teacher_name].data
        for axis, idx in enumerate(entry.axes):
            if idx != "all":
                arr = np.take(arr, idx, axis=axis)
        if arr.shape != shape:
            raise PlanIntegrityError(
                f"{name!r}: gathered shape {arr.shape} != expected {shape}"
            )
        params[name] = Tensor(np.ascontiguousarray(arr), requires_grad=True)
    init_head(params, student, head_seed)
    return params


# ---------------------------------------------------------------------------
# plan export


def plan_to_json(plan: SelectionPlan) -> str:
    doc = {
        name: {"teacher_tensor": e.teacher_name, "axes": e.axes}
        for name, e in plan.items()
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def plan_from_json(text: str) -> SelectionPlan:
    doc = json.loads(text)
    plan: SelectionPlan = {}
    for name, entry in doc.items():
        axes = [a if a == "all" else [int(i) for i in a] for a in entry["axes"]]
        plan[name] = PlanEntry(entry["teacher_tensor"], axes)
    return plan
