"""Canonical JSON model files.

Every tensor is stored as ``{"shape": [...], "data": [...]}`` with floats
written by ``repr`` (shortest round-trip form), keys sorted and no optional
whitespace, so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .heads import ElmModel, ForestHead, Tree
from .network import ActivationMode, Layer, NetworkParams
from .pipeline import HEAD_KINDS, ModelBundle, PreprocessSettings

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Base class for every rejection of a model file."""


class FormatVersionError(ModelFormatError):
    pass


class MissingFieldError(ModelFormatError):
    def __init__(self, field: str):
        super().__init__(f"missing field {field!r}")
        self.field = field


class ShapeError(ModelFormatError):
    pass


class NonFiniteError(ModelFormatError):
    pass


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------


def _tensor(a: np.ndarray, where: str) -> dict:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{where}: non-finite value in tensor")
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _int_tensor(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.int64)
    return {"shape": list(a.shape), "data": [int(v) for v in a.ravel()]}


def _encode_head(bundle: ModelBundle):
    head = bundle.head
    if head is None:
        return None
    if isinstance(head, ElmModel):
        return {
            "type": "elm",
            "inputWeights": _tensor(head.input_weights, "head.inputWeights"),
            "bias": _tensor(head.bias, "head.bias"),
            "outputWeights": _tensor(head.output_weights, "head.outputWeights"),
            "ridge": float(head.ridge),
            "seed": int(head.seed),
        }
    return {
        "type": "forest",
        "numClasses": head.num_classes,
        "mode": ActivationMode(head.mode).value,
        "smoothing": None if head.smoothing is None else float(head.smoothing),
        "trees": [
            {
                "depth": t.depth,
                "splitFeatures": _int_tensor(t.split_features),
                "leafDists": _tensor(t.leaf_dists, f"head.trees[{i}].leafDists"),
            }
            for i, t in enumerate(head.trees)
        ],
    }


def bundle_to_dict(bundle: ModelBundle) -> dict:
    net = bundle.network
    layers = []
    for i, layer in enumerate(net.layers):
        entry = {"kind": layer.kind, "hyper": dict(layer.hyper)}
        if layer.has_params:
            entry["weights"] = _tensor(layer.weights, f"network.layers[{i}].weights")
            entry["bias"] = _tensor(layer.bias, f"network.layers[{i}].bias")
        layers.append(entry)
    return {
        "formatVersion": FORMAT_VERSION,
        "activation": bundle.activation.value,
        "headKind": bundle.head_kind,
        "classNames": list(bundle.class_names),
        "seed": int(bundle.seed),
        "settings": bundle.settings.to_dict(),
        "network": {"inputShape": list(net.input_shape), "numClasses": net.num_classes, "layers": layers},
        "head": _encode_head(bundle),
    }


def dumps(bundle: ModelBundle) -> str:
    return json.dumps(bundle_to_dict(bundle), sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def save_model(bundle: ModelBundle, path) -> Path:
    path = Path(path)
    path.write_text(dumps(bundle), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def _get(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise MissingFieldError(f"{where}.{key}" if where else key)
    return obj[key]


def _read_tensor(obj, where: str, dtype=np.float64) -> np.ndarray:
    shape = _get(obj, "shape", where)
    data = _get(obj, "data", where)
    if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise ShapeError(f"{where}: bad shape {shape!r}")
    if not isinstance(data, list) or len(data) != math.prod(shape):
        raise ShapeError(f"{where}: shape {shape} needs {math.prod(shape)} values, found {len(data) if isinstance(data, list) else 'none'}")
    try:
        arr = np.array(data, dtype=dtype).reshape(shape)
    except (TypeError, ValueError) as exc:
        raise ShapeError(f"{where}: {exc}") from exc
    if dtype is np.float64 and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{where}: non-finite value in tensor")
    return arr


def _expect(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def _decode_network(doc: dict) -> NetworkParams:
    net = _get(doc, "network", "")
    input_shape = tuple(_get(net, "inputShape", "network"))
    num_classes = _get(net, "numClasses", "network")
    _expect(len(input_shape) == 3 and all(isinstance(v, int) and v > 0 for v in input_shape), "network.inputShape must be 3 positive ints")
    layers = []
    c, h, w = input_shape
    flat = None
    for i, entry in enumerate(_get(net, "layers", "network")):
        where = f"network.layers[{i}]"
        kind = _get(entry, "kind", where)
        hyper = dict(_get(entry, "hyper", where))
        if kind == "conv":
            wts = _read_tensor(_get(entry, "weights", where), where + ".weights")
            bias = _read_tensor(_get(entry, "bias", where), where + ".bias")
            _expect(wts.ndim == 4 and wts.shape[1] == c and wts.shape[2] == wts.shape[3] == hyper.get("kernel"),
                    f"{where}: conv weights {wts.shape} inconsistent with {c} input channels")
            _expect(bias.shape == (wts.shape[0],), f"{where}: bias shape {bias.shape} != ({wts.shape[0]},)")
            c = wts.shape[0]
            layers.append(Layer(kind, hyper, wts, bias))
        elif kind == "maxpool":
            s = hyper.get("size")
            _expect(isinstance(s, int) and s >= 1, f"{where}: bad pool size")
            h, w = h // s, w // s
            layers.append(Layer(kind, hyper))
        elif kind == "activation":
            layers.append(Layer(kind, hyper))
        elif kind == "fc":
            wts = _read_tensor(_get(entry, "weights", where), where + ".weights")
            bias = _read_tensor(_get(entry, "bias", where), where + ".bias")
            n_in = c * h * w if flat is None else flat
            _expect(wts.ndim == 2 and wts.shape[0] == n_in, f"{where}: fc weights {wts.shape} expect {n_in} inputs")
            _expect(bias.shape == (wts.shape[1],), f"{where}: bias shape {bias.shape} != ({wts.shape[1]},)")
            flat = wts.shape[1]
            layers.append(Layer(kind, hyper, wts, bias))
        else:
            raise ModelFormatError(f"{where}: unknown layer kind {kind!r}")
    _expect(flat == num_classes, f"network output size {flat} != numClasses {num_classes}")
    return NetworkParams(layers, input_shape, num_classes)


def _decode_head(doc: dict, kind: str, params: NetworkParams):
    head = _get(doc, "head", "")
    if kind == "softmax":
        _expect(head is None, "softmax bundles carry no head payload")
        return None
    if head is None:
        raise MissingFieldError("head")
    hidden = params.layers[params.feature_layer].weights.shape[1]
    if kind == "elm":
        w = _read_tensor(_get(head, "inputWeights", "head"), "head.inputWeights")
        b = _read_tensor(_get(head, "bias", "head"), "head.bias")
        beta = _read_tensor(_get(head, "outputWeights", "head"), "head.outputWeights")
        _expect(w.ndim == 2 and w.shape[0] == hidden, f"head.inputWeights {w.shape} expect {hidden} rows")
        _expect(b.shape == (w.shape[1],), "head.bias length must match the ELM hidden size")
        _expect(beta.shape == (w.shape[1], params.num_classes), f"head.outputWeights {beta.shape} inconsistent")
        return ElmModel(w, b, beta, float(_get(head, "ridge", "head")), int(_get(head, "seed", "head")))
    trees = []
    c = _get(head, "numClasses", "head")
    _expect(c == params.num_classes, "forest class count differs from the network")
    for i, t in enumerate(_get(head, "trees", "head")):
        where = f"head.trees[{i}]"
        depth = _get(t, "depth", where)
        feats = _read_tensor(_get(t, "splitFeatures", where), where + ".splitFeatures", np.int64)
        dists = _read_tensor(_get(t, "leafDists", where), where + ".leafDists")
        _expect(feats.shape == ((1 << depth) - 1,), f"{where}: {feats.size} split nodes for depth {depth}")
        _expect(dists.shape == (1 << depth, c), f"{where}: leaf table {dists.shape} for depth {depth}")
        _expect(feats.size == 0 or (feats.min() >= 0 and feats.max() < hidden), f"{where}: split feature out of range")
        trees.append(Tree(depth, feats, dists))
    _expect(len(trees) > 0, "forest has no trees")
    smoothing = _get(head, "smoothing", "head")
    return ForestHead(tuple(trees), c, ActivationMode(_get(head, "mode", "head")), smoothing)


def bundle_from_dict(doc) -> ModelBundle:
    if not isinstance(doc, dict):
        raise FormatVersionError("not a model document (format version unknown)")
    version = _get(doc, "formatVersion", "")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported format version {version!r} (expected {FORMAT_VERSION})")
    kind = _get(doc, "headKind", "")
    if kind not in HEAD_KINDS:
        raise ModelFormatError(f"unknown headKind {kind!r}")
    params = _decode_network(doc)
    names = tuple(_get(doc, "classNames", ""))
    _expect(len(names) == params.num_classes, f"{len(names)} class names for {params.num_classes} outputs")
    raw = _get(doc, "settings", "")
    try:
        settings = PreprocessSettings(**raw)
    except TypeError as exc:
        raise ModelFormatError(f"settings: {exc}") from exc
    _expect(settings.input_shape == params.input_shape, "settings patch stack differs from the network input shape")
    try:
        activation = ActivationMode(_get(doc, "activation", ""))
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from exc
    head = _decode_head(doc, kind, params)
    return ModelBundle(params, activation, kind, head, settings, names, int(_get(doc, "seed", "")))


def _reject_constant(token: str):
    raise NonFiniteError(f"non-finite value {token} in model file")


def loads(text: str) -> ModelBundle:
    try:
        doc = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise FormatVersionError(f"not a model file (format version unreadable): {exc}") from exc
    return bundle_from_dict(doc)


def load_model(path) -> ModelBundle:
    return loads(Path(path).read_text(encoding="utf-8"))
