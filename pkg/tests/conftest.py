import json

import pytest

from stitchseg import gen_scene, write_scene_bundle


@pytest.fixture
def tiny_scene():
    # 64x64 @ patch 16 -> 4x4 tokens; smallest grid that still splits
    return gen_scene(seed=11, h=64, w=64, patch=16, num_classes=3,
                     noise_sigma=0.1, d=16)


@pytest.fixture
def tiny_bundle(tmp_path, tiny_scene):
    return write_scene_bundle(tiny_scene, tmp_path / "bundle",
                              window=32, stride=16)


def rewrite_manifest(bundle_dir, mutate):
    """Load manifest.json, apply ``mutate`` in place, write it back."""
    path = bundle_dir / "manifest.json"
    raw = json.loads(path.read_text(encoding="utf-8"))
    mutate(raw)
    path.write_text(json.dumps(raw), encoding="utf-8")
    return bundle_dir
