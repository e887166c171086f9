from pathlib import Path

from lib import HASH_LENGTH, canonical_json, config_hash, rm_path, stage_dir


def test_canonical_json() -> None:
    assert canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'


def test_config_hash() -> None:
    value = {"k": 100, "tau": None}

    digest = config_hash(value)

    assert len(digest) == HASH_LENGTH
    assert digest == config_hash({"tau": None, "k": 100})
    assert digest != config_hash({"k": 101, "tau": None})


def test_config_hash_chains_upstream() -> None:
    value = {"k": 100}
    upstream = config_hash({"seed": 0})

    chained = config_hash(value, upstream)

    assert chained != config_hash(value)
    assert chained == config_hash(value, upstream)
    assert chained != config_hash(value, config_hash({"seed": 1}))


def test_stage_dir(tmp_path: Path) -> None:
    assert stage_dir(tmp_path, "abc", "data") == tmp_path / "abc" / "data"


def test_rm_path(tmp_path: Path) -> None:
    tree = tmp_path / "tree"
    (tree / "nested").mkdir(parents=True)
    (tree / "nested" / "file.txt").write_text("x")
    single = tmp_path / "single.txt"
    single.write_text("x")

    rm_path(tree)
    rm_path(single)
    rm_path(tmp_path / "missing")

    assert not tree.exists()
    assert not single.exists()
