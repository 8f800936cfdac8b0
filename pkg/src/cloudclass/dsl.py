"""Feature tokens and parameter files.

Single-cloud features are written ``FEAT_SC#_STAT_PC#``, dual-cloud features
``FEAT_SC#_STAT_PC#_PC$_MATH`` and contextual kNN distances
``DZk_SC0_PC#[_CTX#]`` (``DHk`` for horizontal). ``SC0`` on an ordinary
attribute denotes a point-based feature, and ``SCx`` is a placeholder that
:func:`expand_scales` replaces with every configured scale.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Dict, List, Optional, Tuple, Union

from .errors import FeatureSyntaxError, ParameterFileError
from .spatial import Scale

logger = logging.getLogger(__name__)


class Stat(str, Enum):
    MEAN = "MEAN"
    MODE = "MODE"
    MEDIAN = "MEDIAN"
    STD = "STD"
    RANGE = "RANGE"
    SKEW = "SKEW"


class DualOp(str, Enum):
    MINUS = "MINUS"
    PLUS = "PLUS"
    DIVIDE = "DIVIDE"
    MULTIPLY = "MULTIPLY"


# Neighbourhood shape features: no STAT segment, spherical scales only.
GEOMETRIC_KINDS = (
    "PCA1", "PCA2", "PCA3", "SPHERICITY", "LINEARITY", "PLANARITY",
    "VERTICALITY", "ROUGHNESS", "CURVATURE", "NBPOINTS", "ANISOTROPY", "FOM",
    "DIP", "ZRANGE", "ZMIN", "ZMAX",
)
# Per-point attributes: summarised by a STAT in spheres, read directly at SC0.
ATTRIBUTE_KINDS = (
    "Z", "INTENSITY", "RETURNNUMBER", "NUMBEROFRETURNS", "ECHORATIO", "R", "G", "B",
)
CONTEXT_KINDS = ("DZ", "DH")
CLOUD_ROLES = ("PC1", "PC2")

_CONTEXT_RE = re.compile(r"^(DZ|DH)([0-9]+)$")
_SCALE_RE = re.compile(r"^SC(.+)$")
_CTX_RE = re.compile(r"^CTX([0-9]+)$")


@dataclass(frozen=True)
class KNN:
    k: int


class ScaleMarker(Enum):
    POINTWISE = "0"
    WILDCARD = "x"


POINTWISE = ScaleMarker.POINTWISE
WILDCARD = ScaleMarker.WILDCARD

ScaleLike = Union[Scale, KNN, ScaleMarker]


def format_scale(diameter: float) -> str:
    """Shortest text that parses back to ``diameter`` (``3.0`` -> ``"3"``)."""
    text = repr(float(diameter))
    return text[:-2] if text.endswith(".0") else text


@dataclass(frozen=True)
class FeatureDescriptor:
    kind: str
    scale: ScaleLike
    stat: Optional[Stat] = None
    cloud_a: str = "PC1"
    cloud_b: Optional[str] = None
    dual_op: Optional[DualOp] = None
    ctx_class: Optional[int] = None

    def __post_init__(self):
        if (self.dual_op is None) != (self.cloud_b is None):
            raise ValueError("dual_op and cloud_b must be given together")
        if self.ctx_class is not None and (
            self.kind not in CONTEXT_KINDS or not isinstance(self.scale, KNN)
        ):
            raise ValueError("ctx_class only applies to DZk/DHk features")

    @property
    def is_dual(self) -> bool:
        return self.cloud_b is not None

    @property
    def is_context(self) -> bool:
        return self.kind in CONTEXT_KINDS

    @property
    def is_pointwise(self) -> bool:
        return self.scale is POINTWISE

    @property
    def is_spherical(self) -> bool:
        return isinstance(self.scale, Scale) or self.scale is WILDCARD

    @property
    def diameter(self) -> Optional[float]:
        return self.scale.diameter if isinstance(self.scale, Scale) else None

    @property
    def roles(self) -> Tuple[str, ...]:
        return (self.cloud_a,) + ((self.cloud_b,) if self.cloud_b else ())

    def family(self) -> "FeatureDescriptor":
        """The same feature with its scale replaced by the wildcard."""
        if not self.is_spherical:
            return self
        return FeatureDescriptor(self.kind, WILDCARD, self.stat, self.cloud_a,
                                 self.cloud_b, self.dual_op, self.ctx_class)

    def at_scale(self, diameter: float) -> "FeatureDescriptor":
        return FeatureDescriptor(self.kind, Scale(float(diameter)), self.stat, self.cloud_a,
                                 self.cloud_b, self.dual_op, self.ctx_class)

    def scale_label(self) -> str:
        """Grouping key for per-scale summaries: ``"2.5"``, ``"10NN"`` or ``"point"``."""
        if isinstance(self.scale, Scale):
            return format_scale(self.scale.diameter)
        if isinstance(self.scale, KNN):
            return f"{self.scale.k}NN"
        return "point" if self.scale is POINTWISE else "x"

    def __str__(self) -> str:
        return format_feature(self)


def parse_feature(token: str) -> FeatureDescriptor:
    """Parse one feature token into a :class:`FeatureDescriptor`.

    >>> parse_feature("Z_SC3_MODE_PC1_PC2_MINUS").dual_op
    <DualOp.MINUS: 'MINUS'>
    """
    token = token.strip()
    segs = token.split("_")
    if len(segs) < 3:
        raise FeatureSyntaxError(token, None, "expected at least FEAT_SC#_PC#")

    def fail(i, msg):
        raise FeatureSyntaxError(token, i + 1, f"{segs[i]!r}: {msg}")

    name = segs[0]
    k = None
    m = _CONTEXT_RE.match(name)
    if m:
        kind, k = m.group(1), int(m.group(2))
        if k < 1:
            fail(0, "k must be >= 1")
    elif name in GEOMETRIC_KINDS or name in ATTRIBUTE_KINDS:
        kind = name
    else:
        fail(0, "unknown feature name")

    m = _SCALE_RE.match(segs[1])
    if not m:
        fail(1, "expected a scale segment SC<diameter>, SC0 or SCx")
    sc = m.group(1)
    if sc == "x":
        scale: ScaleLike = WILDCARD
    else:
        try:
            d = float(sc)
        except ValueError:
            fail(1, "malformed scale")
        if d != d or d in (float("inf"), float("-inf")) or d < 0:
            fail(1, "malformed scale")
        scale = POINTWISE if d == 0 else Scale(d)

    pos = 2
    if kind in CONTEXT_KINDS:
        if scale is not POINTWISE:
            fail(1, "kNN features use SC0")
        scale = KNN(k)
        if segs[pos] not in CLOUD_ROLES + ("CTX",):
            fail(pos, "expected PC1, PC2 or CTX")
        cloud_a = segs[pos]
        pos += 1
        ctx_class = None
        if pos < len(segs):
            m = _CTX_RE.match(segs[pos])
            if not m:
                fail(pos, "expected CTX<class>")
            ctx_class = int(m.group(1))
            pos += 1
        if pos < len(segs):
            fail(pos, "unexpected trailing segment")
        return FeatureDescriptor(kind, scale, None, cloud_a, ctx_class=ctx_class)

    stat = None
    if segs[pos] in Stat.__members__:
        stat = Stat(segs[pos])
        if kind not in ATTRIBUTE_KINDS:
            fail(pos, f"{kind} does not take a statistic")
        if scale is POINTWISE:
            fail(pos, "point-based features do not take a statistic")
        pos += 1
    elif segs[pos] not in CLOUD_ROLES:
        fail(pos, "expected a statistic (MEAN, MODE, MEDIAN, STD, RANGE, SKEW) or a cloud role")
    if stat is None and kind in ATTRIBUTE_KINDS and scale is not POINTWISE:
        fail(pos, f"{kind} needs a statistic at a spherical scale")
    if stat is None and kind in GEOMETRIC_KINDS and scale is POINTWISE:
        fail(1, f"{kind} is a neighbourhood feature and needs a spherical scale")
    if pos >= len(segs):
        raise FeatureSyntaxError(token, pos + 1, "missing cloud role")
    if segs[pos] not in CLOUD_ROLES:
        fail(pos, "expected PC1 or PC2")
    cloud_a = segs[pos]
    pos += 1
    cloud_b = op = None
    if pos < len(segs):
        if segs[pos] in DualOp.__members__:
            fail(pos, "operator without a second cloud")
        if segs[pos] not in CLOUD_ROLES:
            fail(pos, "expected the second cloud PC1 or PC2")
        cloud_b = segs[pos]
        pos += 1
        if pos >= len(segs):
            raise FeatureSyntaxError(token, pos + 1, "dual-cloud feature needs MINUS, PLUS, DIVIDE or MULTIPLY")
        if segs[pos] not in DualOp.__members__:
            fail(pos, "expected MINUS, PLUS, DIVIDE or MULTIPLY")
        op = DualOp(segs[pos])
        pos += 1
    if pos < len(segs):
        if segs[pos] in DualOp.__members__:
            fail(pos, "operator without a second cloud")
        fail(pos, "unexpected trailing segment")
    return FeatureDescriptor(kind, scale, stat, cloud_a, cloud_b, op)


def format_feature(d: FeatureDescriptor) -> str:
    """Canonical token for a descriptor; inverse of :func:`parse_feature`."""
    if d.kind in CONTEXT_KINDS:
        parts = [f"{d.kind}{d.scale.k}", "SC0", d.cloud_a]
        if d.ctx_class is not None:
            parts.append(f"CTX{d.ctx_class}")
        return "_".join(parts)
    if d.scale is WILDCARD:
        sc = "SCx"
    elif d.scale is POINTWISE:
        sc = "SC0"
    else:
        sc = "SC" + format_scale(d.scale.diameter)
    parts = [d.kind, sc]
    if d.stat is not None:
        parts.append(d.stat.value)
    parts.append(d.cloud_a)
    if d.cloud_b is not None:
        parts += [d.cloud_b, d.dual_op.value]
    return "_".join(parts)


# -- parameter files -------------------------------------------------------


@dataclass
class PipelineSpec:
    cloud_bindings: Dict[str, str]
    scales: List[float]
    knn_values: List[int]
    descriptors: List[FeatureDescriptor]
    descriptor_lines: List[int] = field(default_factory=list, compare=False, repr=False)

    def core_source(self) -> Tuple[str, Optional[float]]:
        """``("PC1", 1.0)`` for a ``PC1@1.0`` subsample, ``(path, None)`` otherwise."""
        core = self.cloud_bindings.get("CORE", "PC1@1.0")
        m = re.match(r"^(PC1|PC2)@([0-9.eE+-]+)$", core)
        if m:
            return m.group(1), float(m.group(2))
        return core, None


_SECTIONS = ("clouds", "scales", "features")
_BINDABLE = ("PC1", "PC2", "CTX", "CORE")


def _scale_range(text: str, line: int) -> List[float]:
    try:
        lo, hi, step = (float(t) for t in text.split(":"))
    except ValueError:
        raise ParameterFileError(line, f"range must be min:max:step, got {text!r}") from None
    if step <= 0 or lo <= 0 or hi < lo:
        raise ParameterFileError(line, "range needs 0 < min <= max and step > 0")
    n = int(round((hi - lo) / step))
    if lo + n * step > hi + 1e-9 * step:
        n -= 1
    return [round(lo + i * step, 9) for i in range(n + 1)]


def parse_parameter_file(text: str) -> PipelineSpec:
    """Parse the ``[clouds]``/``[scales]``/``[features]`` parameter format."""
    section = None
    bindings: Dict[str, str] = {}
    scales: List[float] = []
    knn: List[int] = []
    descs: List[FeatureDescriptor] = []
    lines: List[int] = []
    seen_scales = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or line[1:-1].strip().lower() not in _SECTIONS:
                raise ParameterFileError(lineno, f"unknown section {line}")
            section = line[1:-1].strip().lower()
            continue
        if section is None:
            raise ParameterFileError(lineno, "content before the first section")
        if section == "features":
            try:
                d = parse_feature(line)
            except FeatureSyntaxError as exc:
                raise ParameterFileError(lineno, str(exc)) from None
            if d in descs:
                raise ParameterFileError(lineno, f"duplicate feature {line}")
            descs.append(d)
            lines.append(lineno)
            continue
        if "=" not in line:
            raise ParameterFileError(lineno, "expected key = value")
        key, value = (t.strip() for t in line.split("=", 1))
        if section == "clouds":
            if key not in _BINDABLE:
                raise ParameterFileError(lineno, f"unknown cloud role {key!r}")
            bindings[key] = value
        elif key == "range":
            scales.extend(_scale_range(value, lineno))
            seen_scales = True
        elif key == "values":
            try:
                vals = [float(t) for t in value.split(",") if t.strip()]
            except ValueError:
                raise ParameterFileError(lineno, f"bad scale list {value!r}") from None
            if any(v <= 0 for v in vals):
                raise ParameterFileError(lineno, "scales must be > 0")
            scales.extend(vals)
            seen_scales = True
        elif key == "knn":
            try:
                knn.extend(int(t) for t in value.split(",") if t.strip())
            except ValueError:
                raise ParameterFileError(lineno, f"bad knn list {value!r}") from None
            if any(k < 1 for k in knn):
                raise ParameterFileError(lineno, "k must be >= 1")
        else:
            raise ParameterFileError(lineno, f"unknown key {key!r} in [scales]")
    if not seen_scales or not scales:
        raise ParameterFileError(None, "scale list empty")
    scales = sorted(set(scales))
    knn = sorted(set(knn))
    if "PC1" not in bindings:
        raise ParameterFileError(None, "PC1 must be bound in [clouds]")
    spec = PipelineSpec(bindings, scales, knn, descs, lines)
    for d, lineno in zip(descs, lines):
        for role in d.roles:
            if role not in bindings:
                raise ParameterFileError(lineno, f"{format_feature(d)} uses unbound cloud {role}")
        if isinstance(d.scale, Scale) and d.scale.diameter not in scales:
            raise ParameterFileError(lineno, f"{format_feature(d)}: scale not listed in [scales]")
        if isinstance(d.scale, KNN) and d.scale.k not in knn:
            raise ParameterFileError(lineno, f"{format_feature(d)}: k not listed in knn")
    return spec


def expand_scales(spec: PipelineSpec) -> List[FeatureDescriptor]:
    """Replace every ``SCx`` descriptor by one copy per scale, in order."""
    out: List[FeatureDescriptor] = []
    seen = set()
    for d in spec.descriptors:
        items = [d.at_scale(s) for s in spec.scales] if d.scale is WILDCARD else [d]
        for item in items:
            if item in seen:
                logger.warning("dropping repeated predictor %s", format_feature(item))
                continue
            seen.add(item)
            out.append(item)
    return out


def write_parameter_file(spec: PipelineSpec) -> str:
    """Serialise a spec back to the parameter-file format."""
    out = ["[clouds]"]
    for role in _BINDABLE:
        if role in spec.cloud_bindings:
            out.append(f"{role} = {spec.cloud_bindings[role]}")
    out.append("[scales]")
    out.append("values = " + ", ".join(format_scale(s) for s in spec.scales))
    if spec.knn_values:
        out.append("knn = " + ", ".join(str(k) for k in spec.knn_values))
    out.append("[features]")
    out.extend(format_feature(d) for d in spec.descriptors)
    return "\n".join(out) + "\n"


def spec_for_predictors(descriptors, bindings: Dict[str, str]) -> PipelineSpec:
    """Minimal spec computing exactly ``descriptors`` (no wildcards)."""
    descriptors = list(descriptors)
    scales = sorted({d.diameter for d in descriptors if isinstance(d.scale, Scale)})
    knn = sorted({d.scale.k for d in descriptors if isinstance(d.scale, KNN)})
    used = {r for d in descriptors for r in d.roles} | {"PC1"}
    keep = {r: p for r, p in bindings.items() if r in used or r == "CORE"}
    return PipelineSpec(keep, scales or [1.0], knn, descriptors)


def default_parameter_text() -> str:
    return resources.files("cloudclass").joinpath("data/default_params.txt").read_text()


def default_spec() -> PipelineSpec:
    return parse_parameter_file(default_parameter_text())
