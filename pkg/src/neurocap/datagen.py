"""Synthetic tri-modal dataset: latent concepts deterministically produce
voxel patterns, image-feature vectors, caption references, and QA pairs.

Every categorical value owns a disjoint block of voxels, so the brain signal
is linearly decodable by construction; noise levels keep that decodability
above 95% held-out. One fixed internal seed drives the voxel dictionary and
the image-feature map, so different datasets share the same "anatomy".
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .tensor import ParameterError

OBJECTS = ("ball", "cat", "car", "tree", "cup", "dog", "boat", "sign")
COLORS = ("red", "blue", "green", "yellow")
SCENES = ("park", "room", "street", "beach")

ANSWER_TABLE = OBJECTS + COLORS + SCENES  # 16 answer classes

NUISANCE_DIM = 8
FORMAT_VERSION = 1
VOXEL_MAGIC = b"BCF1"

_ANATOMY_SEED = 1337  # voxel dictionary / feature map; not per-dataset

_PARAPHRASES = (
    "the {color} {object} is in the {scene} .",
    "there is a {color} {object} in the {scene} .",
    "a {object} that is {color} in the {scene} .",
)

_QUESTIONS = (
    ("what color is the {object} ?", "color"),
    ("what is in the {scene} ?", "object"),
    ("where is the {object} ?", "scene"),
)


@dataclass(frozen=True)
class LatentConcept:
    object_id: int
    color_id: int
    scene_id: int
    nuisance: tuple

    def __post_init__(self):
        if not 0 <= self.object_id < len(OBJECTS):
            raise ParameterError(f"object_id {self.object_id} out of range")
        if not 0 <= self.color_id < len(COLORS):
            raise ParameterError(f"color_id {self.color_id} out of range")
        if not 0 <= self.scene_id < len(SCENES):
            raise ParameterError(f"scene_id {self.scene_id} out of range")
        nui = np.asarray(self.nuisance, dtype=np.float64)
        if nui.shape != (NUISANCE_DIM,):
            raise ParameterError(f"nuisance must have dim {NUISANCE_DIM}")
        if not np.all(np.isfinite(nui)):
            raise ParameterError("nuisance must be finite")
        object.__setattr__(self, "nuisance", tuple(float(x) for x in nui))

    @property
    def object(self):
        return OBJECTS[self.object_id]

    @property
    def color(self):
        return COLORS[self.color_id]

    @property
    def scene(self):
        return SCENES[self.scene_id]

    def one_hot(self) -> np.ndarray:
        """Categoricals one-hot [16] followed by the nuisance vector [8]."""
        v = np.zeros(len(ANSWER_TABLE) + NUISANCE_DIM)
        v[self.object_id] = 1.0
        v[len(OBJECTS) + self.color_id] = 1.0
        v[len(OBJECTS) + len(COLORS) + self.scene_id] = 1.0
        v[len(ANSWER_TABLE):] = self.nuisance
        return v


# ---------------------------------------------------------------------------
# voxels
# ---------------------------------------------------------------------------


@lru_cache(maxsize=8)
def voxel_dictionary(n_voxels: int):
    """Disjoint voxel supports and loadings for the 16 categorical values,
    plus the nuisance leakage matrix. Fixed given n_voxels."""
    if n_voxels < 64:
        raise ParameterError(f"n_voxels must be >= 64, got {n_voxels}")
    rng = np.random.default_rng([_ANATOMY_SEED, n_voxels])
    n_values = len(ANSWER_TABLE)
    support_size = n_voxels // (2 * n_values)  # half the voxels stay unowned
    perm = rng.permutation(n_voxels)
    supports = []
    loadings = []
    for i in range(n_values):
        supports.append(np.sort(perm[i * support_size:(i + 1) * support_size]))
        loadings.append(0.75 + 0.5 * rng.random(support_size))
    leakage = rng.normal(0.0, 0.05, size=(NUISANCE_DIM, n_voxels))
    return supports, loadings, leakage


def _value_index(latent: LatentConcept, kind: str) -> int:
    if kind == "object":
        return latent.object_id
    if kind == "color":
        return len(OBJECTS) + latent.color_id
    return len(OBJECTS) + len(COLORS) + latent.scene_id


def clean_voxels(latent: LatentConcept, n_voxels: int) -> np.ndarray:
    """Noise-free voxel pattern: additive loadings on the three active
    supports plus nuisance leakage. Not z-scored."""
    supports, loadings, leakage = voxel_dictionary(n_voxels)
    v = np.asarray(latent.nuisance) @ leakage
    for kind in ("object", "color", "scene"):
        i = _value_index(latent, kind)
        v[supports[i]] += loadings[i]
    return v


def latent_to_voxels(latent: LatentConcept, seed, n_voxels: int) -> np.ndarray:
    """Noisy, per-sample z-scored voxel pattern."""
    v = clean_voxels(latent, n_voxels)
    v = v + np.random.default_rng(seed).normal(0.0, 0.1, size=n_voxels)
    return (v - v.mean()) / v.std()


# ---------------------------------------------------------------------------
# image features
# ---------------------------------------------------------------------------


@lru_cache(maxsize=8)
def _feature_map(d_img: int) -> np.ndarray:
    if d_img < 16:
        raise ParameterError(f"d_img must be >= 16, got {d_img}")
    rng = np.random.default_rng([_ANATOMY_SEED + 1, d_img])
    d_in = len(ANSWER_TABLE) + NUISANCE_DIM
    return rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_img))


def clean_image_feats(latent: LatentConcept, d_img: int) -> np.ndarray:
    return latent.one_hot() @ _feature_map(d_img)


def latent_to_image_feats(latent: LatentConcept, seed, d_img: int) -> np.ndarray:
    v = clean_image_feats(latent, d_img)
    return v + np.random.default_rng(seed).normal(0.0, 0.05, size=d_img)


# ---------------------------------------------------------------------------
# text
# ---------------------------------------------------------------------------


def latent_to_caption(latent: LatentConcept) -> str:
    return f"a {latent.color} {latent.object} in the {latent.scene} ."


def caption_refs(latent: LatentConcept, seed) -> list:
    """Canonical caption first, then 0-2 seeded paraphrases."""
    refs = [latent_to_caption(latent)]
    rng = np.random.default_rng(seed)
    extra = int(rng.integers(0, 3))
    picks = rng.choice(len(_PARAPHRASES), size=extra, replace=False)
    fields = dict(color=latent.color, object=latent.object, scene=latent.scene)
    refs.extend(_PARAPHRASES[i].format(**fields) for i in picks)
    return refs


def gen_qa(latent: LatentConcept) -> list:
    answers = dict(color=latent.color, object=latent.object, scene=latent.scene)
    out = []
    for template, answer_kind in _QUESTIONS:
        q = template.format(object=latent.object, scene=latent.scene)
        out.append((q, answers[answer_kind]))
    return out


def answer_id(word: str) -> int:
    return ANSWER_TABLE.index(word)


def all_grammar_words() -> list:
    """Every whitespace token the caption/question grammar can emit."""
    words = set(ANSWER_TABLE)
    probe = dict(color="red", object="ball", scene="park")
    for template in (latent_to_caption(LatentConcept(0, 0, 0, (0.0,) * 8)),
                     *(p.format(**probe) for p in _PARAPHRASES),
                     *(q.format(**probe) for q, _ in _QUESTIONS)):
        words.update(template.split())
    return sorted(words)


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------


def make_latent(seed, index: int) -> LatentConcept:
    rng = np.random.default_rng([seed, 0, index])
    return LatentConcept(
        object_id=int(rng.integers(len(OBJECTS))),
        color_id=int(rng.integers(len(COLORS))),
        scene_id=int(rng.integers(len(SCENES))),
        nuisance=tuple(rng.normal(size=NUISANCE_DIM)),
    )


def sample_seeds(seed, index: int):
    """(voxel, feature, caption) noise seeds for one sample."""
    rng = np.random.default_rng([seed, 2, index])
    vox, feat, cap = rng.integers(2 ** 63, size=3)
    return int(vox), int(feat), int(cap)


@dataclass
class DatasetManifest:
    n_samples: int
    n_voxels: int
    d_img: int
    seed: int
    train_ids: list
    test_ids: list
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": self.format_version,
                "n_samples": self.n_samples,
                "n_voxels": self.n_voxels,
                "d_img": self.d_img,
                "seed": self.seed,
                "train_ids": self.train_ids,
                "test_ids": self.test_ids,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        return cls(
            n_samples=d["n_samples"], n_voxels=d["n_voxels"], d_img=d["d_img"],
            seed=d["seed"], train_ids=d["train_ids"], test_ids=d["test_ids"],
            format_version=d["format_version"],
        )


def write_voxel_blob(path, voxels: np.ndarray):
    voxels = np.asarray(voxels)
    if voxels.ndim != 2:
        raise ParameterError(f"voxel blob needs [n, V], got {voxels.shape}")
    n, v = voxels.shape
    with open(path, "wb") as f:
        f.write(VOXEL_MAGIC)
        f.write(struct.pack("<II", n, v))
        f.write(np.ascontiguousarray(voxels, dtype="<f4").tobytes())


def read_voxel_blob(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != VOXEL_MAGIC:
        raise ValueError(f"bad voxel blob magic: {raw[:4]!r}")
    n, v = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * n * v
    if len(raw) != expected:
        raise ValueError(f"voxel blob length {len(raw)} != expected {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(n, v).copy()


def _make_record(seed, index: int, d_img: int):
    latent = make_latent(seed, index)
    _, _, cap_seed = sample_seeds(seed, index)
    refs = caption_refs(latent, cap_seed)
    qa = [{"q": q, "a": a} for q, a in gen_qa(latent)]
    return latent, {
        "id": index,
        "caption_refs": refs,
        "qa": qa,
        "latent": {
            "object_id": latent.object_id,
            "color_id": latent.color_id,
            "scene_id": latent.scene_id,
            "nuisance": list(latent.nuisance),
        },
    }


def gen_dataset(n: int, n_voxels: int, d_img: int, seed, out_dir) -> DatasetManifest:
    """Write manifest.json, voxels.bcf, records.jsonl. Deterministic."""
    if n < 8:
        raise ParameterError(f"n must be >= 8, got {n}")
    voxel_dictionary(n_voxels)
    _feature_map(d_img)
    os.makedirs(out_dir, exist_ok=True)

    voxels = np.empty((n, n_voxels), dtype=np.float32)
    lines = []
    for i in range(n):
        latent, record = _make_record(seed, i, d_img)
        vox_seed, _, _ = sample_seeds(seed, i)
        voxels[i] = latent_to_voxels(latent, vox_seed, n_voxels)
        lines.append(json.dumps(record, sort_keys=True))

    n_test = n // 10
    perm = np.random.default_rng([seed, 1]).permutation(n)
    test_ids = sorted(int(i) for i in perm[:n_test])
    train_ids = sorted(int(i) for i in perm[n_test:])

    manifest = DatasetManifest(n_samples=n, n_voxels=n_voxels, d_img=d_img,
                               seed=seed, train_ids=train_ids, test_ids=test_ids)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        f.write(manifest.to_json() + "\n")
    write_voxel_blob(os.path.join(out_dir, "voxels.bcf"), voxels)
    with open(os.path.join(out_dir, "records.jsonl"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return manifest


@dataclass
class Dataset:
    manifest: DatasetManifest
    voxels: np.ndarray       # [n, V] float32
    image_feats: np.ndarray  # [n, D_img] float32, recomputed from latents
    records: list = field(repr=False)

    @property
    def train_ids(self):
        return self.manifest.train_ids

    @property
    def test_ids(self):
        return self.manifest.test_ids

    def latent(self, i: int) -> LatentConcept:
        d = self.records[i]["latent"]
        return LatentConcept(d["object_id"], d["color_id"], d["scene_id"],
                             tuple(d["nuisance"]))

    def caption_refs(self, i: int) -> list:
        return self.records[i]["caption_refs"]

    def qa(self, i: int) -> list:
        return [(p["q"], p["a"]) for p in self.records[i]["qa"]]


def load_dataset(out_dir) -> Dataset:
    """Read the three files back; image features are regenerated from the
    stored latents and the manifest seed."""
    with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as f:
        manifest = DatasetManifest.from_json(f.read())
    voxels = read_voxel_blob(os.path.join(out_dir, "voxels.bcf"))
    if voxels.shape != (manifest.n_samples, manifest.n_voxels):
        raise ValueError(
            f"voxel blob shape {voxels.shape} disagrees with manifest "
            f"({manifest.n_samples}, {manifest.n_voxels})"
        )
    records = []
    with open(os.path.join(out_dir, "records.jsonl"), encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(json.loads(line))
    if len(records) != manifest.n_samples:
        raise ValueError(f"expected {manifest.n_samples} records, got {len(records)}")
    records.sort(key=lambda r: r["id"])

    feats = np.empty((manifest.n_samples, manifest.d_img), dtype=np.float32)
    ds = Dataset(manifest=manifest, voxels=voxels, image_feats=feats, records=records)
    for i in range(manifest.n_samples):
        _, feat_seed, _ = sample_seeds(manifest.seed, i)
        feats[i] = latent_to_image_feats(ds.latent(i), feat_seed, manifest.d_img)
    return ds
