"""温度場サロゲートの全結合 tanh ネットワーク。

入力の1階・2階微分を前向きジェットで厳密に伝播し、複合損失のパラメータ勾配は
ジェットを通した逆伝播で求める。最適化は Adam。
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .domain import AMBIENT_TEMPERATURE, BoundaryKind
from .errors import OptimizerError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_WIDTHS: Tuple[int, ...] = (2, 50, 50, 50, 50, 1)
OUTPUT_SCALE = 50.0

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class InitScheme(str, Enum):
    XAVIER = "xavier"
    TRANSFER = "transfer"


@dataclass(frozen=True)
class Scaling:
    """入力の [−1, 1]² への正規化と出力 T = t_offset + t_scale·τ の定数。"""

    lx: float = 0.1
    ly: float = 0.1
    t_offset: float = AMBIENT_TEMPERATURE
    t_scale: float = OUTPUT_SCALE

    def normalize(self, points: Any) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        return np.column_stack([2.0 * points[:, 0] / self.lx - 1.0, 2.0 * points[:, 1] / self.ly - 1.0])

    @property
    def dx(self) -> float:
        """dξ/dx"""
        return 2.0 / self.lx

    @property
    def dy(self) -> float:
        return 2.0 / self.ly


@dataclass(frozen=True, eq=False)
class NetParams:
    """層幅 [2, d1, …, 1] と各層の重み W_k (fan_in × fan_out)、バイアス b_k。"""

    widths: Tuple[int, ...]
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    scaling: Scaling = field(default_factory=Scaling)

    def __post_init__(self) -> None:
        widths = tuple(int(w) for w in self.widths)
        _check_widths(widths)
        object.__setattr__(self, "widths", widths)
        weights = tuple(np.array(w, dtype=float) for w in self.weights)
        biases = tuple(np.array(b, dtype=float).reshape(-1) for b in self.biases)
        if len(weights) != len(widths) - 1 or len(biases) != len(widths) - 1:
            raise ValidationError("層数が widths と一致しません")
        for k, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (widths[k], widths[k + 1]) or b.shape != (widths[k + 1],):
                raise ValidationError(f"{k} 層目の形状 {w.shape}/{b.shape} が widths と一致しません")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"{k} 層目に非有限値が含まれています")
            w.setflags(write=False)
            b.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def equals(self, other: "NetParams") -> bool:
        """全パラメータがビット単位で等しいか。"""
        return (
            self.widths == other.widths
            and self.scaling == other.scaling
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "widths": list(self.widths),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "scaling": {
                "lx": self.scaling.lx,
                "ly": self.scaling.ly,
                "t_offset": self.scaling.t_offset,
                "t_scale": self.scaling.t_scale,
            },
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NetParams":
        try:
            scaling = Scaling(**{key: float(value) for key, value in data["scaling"].items()})
            return cls(
                widths=tuple(data["widths"]),
                weights=tuple(np.asarray(w, dtype=float) for w in data["weights"]),
                biases=tuple(np.asarray(b, dtype=float) for b in data["biases"]),
                scaling=scaling,
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"ネットワークパラメータの形式が不正です: {exc}") from exc


def _check_widths(widths: Sequence[int]) -> None:
    if len(widths) < 2 or widths[0] != 2 or widths[-1] != 1:
        raise ValidationError(f"widths は 2 で始まり 1 で終わる必要があります: {list(widths)}")
    if any(w < 1 for w in widths):
        raise ValidationError(f"widths の各要素は1以上が必要です: {list(widths)}")


def init_params(
    widths: Sequence[int] = DEFAULT_WIDTHS,
    scheme: InitScheme = InitScheme.XAVIER,
    seed: int = 0,
    *,
    source: Optional[NetParams] = None,
    scaling: Optional[Scaling] = None,
) -> NetParams:
    """パラメータを初期化する。

    Xavier は W_k を平均0・分散 2/(fan_in + fan_out) の正規分布から引き、バイアスは0。
    Transfer は source をそのまま複製する。
    """
    widths = tuple(int(w) for w in widths)
    _check_widths(widths)
    scheme = InitScheme(scheme)
    if scheme is InitScheme.TRANSFER:
        if source is None:
            raise ValidationError("Transfer 初期化には source が必要です")
        if source.widths != widths:
            raise ValidationError(
                f"Transfer 元の widths {list(source.widths)} が {list(widths)} と一致しません"
            )
        return NetParams(source.widths, source.weights, source.biases, scaling or source.scaling)
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        std = math.sqrt(2.0 / (fan_in + fan_out))
        weights.append(rng.normal(0.0, std, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetParams(widths, tuple(weights), tuple(biases), scaling or Scaling())


# ----- 前向きジェット ------------------------------------------------------


@dataclass(frozen=True)
class Jet2:
    """値と、各軸の1階・2階微分。"""

    value: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    dxx: np.ndarray
    dyy: np.ndarray

    @property
    def laplacian(self) -> np.ndarray:
        return self.dxx + self.dyy


# 1層分のジェット (値, ∂ξ, ∂η, ∂ξξ, ∂ηη)、各要素は (N, width)
_LayerJet = Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]


@dataclass
class _Tape:
    inputs: List[_LayerJet]
    pre: List[_LayerJet]
    act: List[np.ndarray]


def forward(params: NetParams, xi: Any) -> Tuple[Jet2, _Tape]:
    """正規化座標 (N, 2) 上で生出力 τ のジェットを計算する。"""
    xi = np.asarray(xi, dtype=float).reshape(-1, 2)
    count = xi.shape[0]
    a = xi
    a_x = np.tile(np.array([1.0, 0.0]), (count, 1))
    a_y = np.tile(np.array([0.0, 1.0]), (count, 1))
    a_xx = np.zeros((count, 2))
    a_yy = np.zeros((count, 2))
    tape = _Tape([], [], [])
    last = params.n_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        tape.inputs.append((a, a_x, a_y, a_xx, a_yy))
        z = a @ w + b
        z_x, z_y, z_xx, z_yy = a_x @ w, a_y @ w, a_xx @ w, a_yy @ w
        if k == last:
            jet = Jet2(z[:, 0], z_x[:, 0], z_y[:, 0], z_xx[:, 0], z_yy[:, 0])
            return jet, tape
        tape.pre.append((z, z_x, z_y, z_xx, z_yy))
        t = np.tanh(z)
        tape.act.append(t)
        s1 = 1.0 - t * t
        s2 = -2.0 * t * s1
        a = t
        a_x, a_y = s1 * z_x, s1 * z_y
        a_xx = s2 * z_x * z_x + s1 * z_xx
        a_yy = s2 * z_y * z_y + s1 * z_yy
    raise AssertionError("unreachable")


def backward(params: NetParams, tape: _Tape, grad_out: _LayerJet) -> Tuple[np.ndarray, ...]:
    """出力ジェット各成分への勾配 (各 (N,)) からパラメータ勾配を求める。

    Returns:
        (dW_0, db_0, dW_1, db_1, …)
    """
    g = tuple(np.asarray(component, dtype=float).reshape(-1, 1) for component in grad_out)
    grads: List[np.ndarray] = []
    for k in range(params.n_layers - 1, -1, -1):
        w = params.weights[k]
        a, a_x, a_y, a_xx, a_yy = tape.inputs[k]
        g_z, g_zx, g_zy, g_zxx, g_zyy = g
        d_w = a.T @ g_z + a_x.T @ g_zx + a_y.T @ g_zy + a_xx.T @ g_zxx + a_yy.T @ g_zyy
        d_b = g_z.sum(axis=0)
        grads.extend([d_b, d_w])
        if k == 0:
            break
        g_a, g_ax, g_ay, g_axx, g_ayy = (component @ w.T for component in g)
        z, z_x, z_y, z_xx, z_yy = tape.pre[k - 1]
        t = tape.act[k - 1]
        s1 = 1.0 - t * t
        s2 = -2.0 * t * s1
        s3 = s1 * (6.0 * t * t - 2.0)
        g = (
            g_a * s1
            + g_ax * s2 * z_x
            + g_ay * s2 * z_y
            + g_axx * (s3 * z_x * z_x + s2 * z_xx)
            + g_ayy * (s3 * z_y * z_y + s2 * z_yy),
            g_ax * s1 + 2.0 * g_axx * s2 * z_x,
            g_ay * s1 + 2.0 * g_ayy * s2 * z_y,
            g_axx * s1,
            g_ayy * s1,
        )
    grads.reverse()
    return tuple(grads)


def eval_jet(params: NetParams, points: Any) -> Jet2:
    """物理座標 (m) の点における温度 T (K) とその微分を返す。"""
    scaling = params.scaling
    raw, _ = forward(params, scaling.normalize(points))
    return _to_physical(raw, scaling)


def _to_physical(raw: Jet2, scaling: Scaling) -> Jet2:
    s = scaling.t_scale
    return Jet2(
        value=scaling.t_offset + s * raw.value,
        dx=s * scaling.dx * raw.dx,
        dy=s * scaling.dy * raw.dy,
        dxx=s * scaling.dx ** 2 * raw.dxx,
        dyy=s * scaling.dy ** 2 * raw.dyy,
    )


def evaluate(params: NetParams, points: Any) -> np.ndarray:
    """温度値のみを返す。"""
    return eval_jet(params, points).value


# ----- 損失 ------------------------------------------------------------------


@dataclass(frozen=True)
class BoundaryBatch:
    """同一の境界条件を持つ境界点の集合。normal は外向き単位法線。"""

    points: np.ndarray
    kind: BoundaryKind
    normal: Tuple[float, float]
    t0: float = AMBIENT_TEMPERATURE
    h_conv: float = 0.0


@dataclass(frozen=True)
class LossBatches:
    """損失の評価点集合。

    source_matrix は内部点 × 熱源の行列で、φ (定格比) から発熱 φ(p) = source_matrix @ φ (W/m²)
    を与える。
    """

    interior: np.ndarray
    source_matrix: np.ndarray
    boundary: Tuple[BoundaryBatch, ...] = ()
    data_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    data_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_boundary(self) -> int:
        return sum(batch.points.shape[0] for batch in self.boundary)

    def with_data(self, points: Any, values: Any) -> "LossBatches":
        return replace(
            self,
            data_points=np.asarray(points, dtype=float).reshape(-1, 2),
            data_values=np.asarray(values, dtype=float).reshape(-1),
        )


@dataclass(frozen=True)
class LossWeights:
    pde: float = 1.0
    bc: float = 1.0
    data: float = 1e4

    def __post_init__(self) -> None:
        if min(self.pde, self.bc, self.data) < 0:
            raise ValidationError("損失の重みは0以上が必要です")


@dataclass(frozen=True)
class LossScales:
    """PDE 残差と流束残差を温度相当に揃える除数。"""

    pde: float
    flux: float

    @classmethod
    def default(cls, conductivity: float, lx: float, ly: float) -> "LossScales":
        return cls(pde=conductivity * 4.0 / (lx * ly), flux=conductivity * 2.0 / max(lx, ly))


@dataclass(frozen=True)
class LossValue:
    total: float
    pde: float
    bc: float
    data: float

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.total, self.pde, self.bc, self.data)


def loss_and_grads(
    params: NetParams,
    phi: Any,
    batches: LossBatches,
    weights: LossWeights,
    conductivity: float,
    scales: LossScales,
) -> Tuple[LossValue, np.ndarray, np.ndarray]:
    """w_pde·L_pde + w_bc·L_bc + w_data·L_data とその勾配を計算する。

    各項は残差の二乗平均。勾配はネットワークパラメータ (flatten_params の並び) と φ について返す。

    Raises:
        ValidationError: 重みが正の項の点集合が空、または φ の長さが一致しない場合。
    """
    phi = np.asarray(phi, dtype=float).reshape(-1)
    if batches.source_matrix.shape != (batches.interior.shape[0], phi.shape[0]):
        raise ValidationError(
            f"source_matrix {batches.source_matrix.shape} が内部点数・φ の長さと一致しません"
        )
    n_int = batches.interior.shape[0]
    n_bc = batches.n_boundary
    n_data = batches.data_points.shape[0]
    for name, count, weight in (("pde", n_int, weights.pde), ("bc", n_bc, weights.bc), ("data", n_data, weights.data)):
        if count == 0 and weight != 0:
            raise ValidationError(f"重み {weight} の {name} 項の点集合が空です")
    if batches.data_values.shape[0] != n_data:
        raise ValidationError("data_points と data_values の個数が一致しません")

    scaling = params.scaling
    stacked = [batches.interior] + [batch.points for batch in batches.boundary] + [batches.data_points]
    points = np.vstack([np.asarray(p, dtype=float).reshape(-1, 2) for p in stacked])
    raw, tape = forward(params, scaling.normalize(points))
    jet = _to_physical(raw, scaling)
    total_points = points.shape[0]
    g_v, g_x, g_y, g_xx, g_yy = (np.zeros(total_points) for _ in range(5))
    s = scaling.t_scale
    grad_phi = np.zeros_like(phi)

    # PDE: (k ΔT + φ) / pde_scale
    l_pde = 0.0
    if n_int:
        sl = slice(0, n_int)
        r = (conductivity * jet.laplacian[sl] + batches.source_matrix @ phi) / scales.pde
        l_pde = float(np.mean(r * r))
        g_r = weights.pde * 2.0 * r / n_int
        coef = g_r * conductivity / scales.pde * s
        g_xx[sl] += coef * scaling.dx ** 2
        g_yy[sl] += coef * scaling.dy ** 2
        grad_phi = batches.source_matrix.T @ (g_r / scales.pde)

    # BC
    l_bc = 0.0
    start = n_int
    residual_sq = 0.0
    for batch in batches.boundary:
        count = batch.points.shape[0]
        sl = slice(start, start + count)
        start += count
        if count == 0:
            continue
        nx, ny = batch.normal
        flux = nx * jet.dx[sl] + ny * jet.dy[sl]
        if batch.kind is BoundaryKind.DIRICHLET:
            r = jet.value[sl] - batch.t0
            g_r = weights.bc * 2.0 * r / n_bc
            g_v[sl] += g_r * s
        else:
            r = conductivity * flux / scales.flux
            if batch.kind is BoundaryKind.ROBIN:
                r = r + batch.h_conv * (jet.value[sl] - batch.t0) / scales.flux
            g_r = weights.bc * 2.0 * r / n_bc
            coef = g_r * conductivity / scales.flux * s
            g_x[sl] += coef * nx * scaling.dx
            g_y[sl] += coef * ny * scaling.dy
            if batch.kind is BoundaryKind.ROBIN:
                g_v[sl] += g_r * batch.h_conv / scales.flux * s
        residual_sq += float(np.sum(r * r))
    if n_bc:
        l_bc = residual_sq / n_bc

    # data
    l_data = 0.0
    if n_data:
        sl = slice(start, start + n_data)
        r = jet.value[sl] - batches.data_values
        l_data = float(np.mean(r * r))
        g_v[sl] += weights.data * 2.0 * r / n_data * s

    total = weights.pde * l_pde + weights.bc * l_bc + weights.data * l_data
    grads = backward(params, tape, (g_v, g_x, g_y, g_xx, g_yy))
    grad_theta = np.concatenate([g.reshape(-1) for g in grads])
    return LossValue(float(total), l_pde, l_bc, l_data), grad_theta, grad_phi


# ----- パラメータのベクトル化 ------------------------------------------------


def flatten_params(params: NetParams) -> np.ndarray:
    """(W_0, b_0, W_1, b_1, …) の順に1次元へ並べる。"""
    parts: List[np.ndarray] = []
    for w, b in zip(params.weights, params.biases):
        parts.extend([w.reshape(-1), b])
    return np.concatenate(parts)


def unflatten_params(vector: Any, like: NetParams) -> NetParams:
    vector = np.asarray(vector, dtype=float).reshape(-1)
    if vector.shape[0] != like.size:
        raise ValidationError(f"パラメータ数 {vector.shape[0]} が {like.size} と一致しません")
    weights: List[np.ndarray] = []
    biases: List[np.ndarray] = []
    offset = 0
    for w, b in zip(like.weights, like.biases):
        weights.append(vector[offset:offset + w.size].reshape(w.shape))
        offset += w.size
        biases.append(vector[offset:offset + b.size])
        offset += b.size
    return NetParams(like.widths, tuple(weights), tuple(biases), like.scaling)


# ----- Adam --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OptState:
    """Adam の1次・2次モーメントとステップ数。"""

    lr: float
    step: int
    m_theta: np.ndarray
    v_theta: np.ndarray
    m_phi: np.ndarray
    v_phi: np.ndarray

    @classmethod
    def create(cls, params: NetParams, phi: Any, lr: float = 1e-3) -> "OptState":
        if not lr > 0:
            raise ValidationError("学習率は正でなければなりません")
        n_phi = np.asarray(phi).reshape(-1).shape[0]
        return cls(
            lr=float(lr),
            step=0,
            m_theta=np.zeros(params.size),
            v_theta=np.zeros(params.size),
            m_phi=np.zeros(n_phi),
            v_phi=np.zeros(n_phi),
        )


def _adam(x: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, lr: float, step: int):
    m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
    v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
    m_hat = m / (1.0 - ADAM_BETA1 ** step)
    v_hat = v / (1.0 - ADAM_BETA2 ** step)
    return x - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS), m, v


def opt_step(
    state: OptState,
    params: NetParams,
    phi: Any,
    grad_theta: Any,
    grad_phi: Any,
    *,
    phi_trainable: bool = True,
) -> Tuple[OptState, NetParams, np.ndarray]:
    """Adam で1ステップ更新する。phi_trainable が False なら φ は据え置く。

    Raises:
        OptimizerError: 勾配に非有限値が含まれる場合。
        ValidationError: 形状が一致しない場合。
    """
    phi = np.asarray(phi, dtype=float).reshape(-1)
    grad_theta = np.asarray(grad_theta, dtype=float).reshape(-1)
    grad_phi = np.asarray(grad_phi, dtype=float).reshape(-1)
    if grad_theta.shape != state.m_theta.shape or grad_phi.shape != state.m_phi.shape:
        raise ValidationError("勾配の形状がオプティマイザの状態と一致しません")
    if phi.shape != state.m_phi.shape:
        raise ValidationError("φ の形状がオプティマイザの状態と一致しません")
    if not (np.all(np.isfinite(grad_theta)) and np.all(np.isfinite(grad_phi))):
        raise OptimizerError(f"step {state.step + 1}: 勾配に非有限値が含まれています")
    step = state.step + 1
    theta, m_theta, v_theta = _adam(flatten_params(params), grad_theta, state.m_theta, state.v_theta, state.lr, step)
    m_phi, v_phi = state.m_phi, state.v_phi
    if phi_trainable and phi.size:
        phi, m_phi, v_phi = _adam(phi, grad_phi, m_phi, v_phi, state.lr, step)
    new_state = OptState(state.lr, step, m_theta, v_theta, m_phi, v_phi)
    return new_state, unflatten_params(theta, params), phi
