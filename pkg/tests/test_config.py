import pytest

from loraserve.config import ConfigError, default_config, load_config, parse_yaml, total_pages


def err(text):
    with pytest.raises(ConfigError) as exc:
        load_config(text=text)
    return exc.value


def test_defaults_valid():
    cfg = load_config()
    assert cfg == load_config(text="")
    assert cfg["scheduler"]["max_batch"] == 32
    # (80 GB - 16 GB) / 8 MiB pages
    assert total_pages(cfg) == int((8.0e10 - 1.6e10) // (8 * 1024 * 1024))


def test_overlay_and_float_coercion():
    cfg = load_config(text="cost_model:\n  peak_flops: 1e14\n  mem_bw: 2\nworkload:\n  seed: 9\n")
    assert cfg["cost_model"]["peak_flops"] == 1e14
    assert isinstance(cfg["cost_model"]["mem_bw"], float)
    assert cfg["workload"]["seed"] == 9
    assert cfg["workload"]["alpha"] == 1.5


def test_exponent_without_dot_is_float():
    data, _ = parse_yaml("a: 1e9\nb: 2.5E-6\n")
    assert data == {"a": 1e9, "b": 2.5e-6}


def test_unknown_key_has_line():
    e = err("workload:\n  seed: 1\n  sede: 2\n")
    assert e.line == 3 and "unknown key 'workload.sede'" in str(e)


def test_type_mismatch_has_line():
    e = err("scheduler:\n\n  max_batch: big\n")
    assert e.line == 3 and "expects int" in str(e)


def test_bool_is_not_int():
    assert "expects int" in str(err("scheduler:\n  max_batch: true\n"))


def test_duplicate_key():
    e = err("output:\n  dir: a\n  dir: b\n")
    assert e.line == 3 and "duplicate" in str(e)


def test_syntax_error_line():
    e = err("workload:\n  seed: [1, 2\n")
    assert e.line is not None


def test_semantic_checks_point_at_key():
    assert err("workload:\n  alpha: 1.0\n").line == 2
    assert err("scheduler:\n  max_batch: 0\n").line == 2
    assert err("kvcache:\n  elem_bytes: 3\n").line == 2
    assert "popularity" in str(err("workload:\n  popularity: bimodal\n"))
    assert "reserved_memory" in str(err("cluster:\n  reserved_memory: 9.0e10\n"))


def test_ramp_profile_checks():
    e = err("workload:\n  arrival:\n    kind: ramp\n    profile: [[0, 0], [10, 5], [5, 0]]\n")
    assert "increasing t" in str(e)
    e = err("workload:\n  arrival:\n    kind: ramp\n    profile: [[0, 0], [10, 0]]\n")
    assert "zero rate" in str(e)


def test_num_requests_nullable_only_without_poisson():
    cfg = load_config(text="workload:\n  num_requests: null\n  arrival:\n"
                           "    kind: ramp\n    profile: [[0, 0], [10, 5], [20, 0]]\n")
    assert cfg["workload"]["num_requests"] is None
    assert "need num_requests" in str(err("workload:\n  num_requests: null\n"))


def test_other_concrete_keys_not_nullable():
    assert "expects int" in str(err("scheduler:\n  max_batch: null\n"))


def test_lengths_fixed():
    assert load_config(text="workload:\n  lengths:\n    fixed: [3, 4]\n")["workload"]["lengths"]["fixed"] == [3, 4]
    assert "fixed lengths" in str(err("workload:\n  lengths:\n    fixed: [3]\n"))


def test_anchors_shape():
    assert "anchors" in str(err("cost_model:\n  anchors: [[1, 2]]\n"))


def test_top_level_must_be_mapping():
    assert err("- 1\n- 2\n").line == 1


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.yaml")


def test_file_path_in_message(tmp_path):
    p = tmp_path / "exp.yaml"
    p.write_text("output:\n  bogus: 1\n")
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    assert str(exc.value).startswith(f"{p}:2: ")


def test_overrides_dict():
    cfg = load_config(overrides={"cluster": {"gpu_count": 4}})
    assert cfg["cluster"]["gpu_count"] == 4
    with pytest.raises(ConfigError):
        load_config(overrides={"cluster": {"gpus": 4}})


def test_default_config_is_fresh_copy():
    a = default_config()
    a["output"]["dir"] = "x"
    assert default_config()["output"]["dir"] == "out"
