import posixpath

import pytest
from hypothesis import given, settings, strategies as st

from boxer.fsremap import (RESOLV_CONF, RemapParseError, RemapRule, RemapTable, load_rules, normalize,
                           parse_rules)


def test_empty_file_gives_only_the_resolver_rule(tmp_path):
    cfg = tmp_path / "rules"
    cfg.write_text("")
    table = load_rules(str(cfg), "/run/bx")
    assert table.rules == (RemapRule(RESOLV_CONF, "/run/bx/resolv.conf", "exact"),)
    assert table.remap("/etc/resolv.conf") == "/run/bx/resolv.conf"


def test_boxer_dir_expands_in_rule_files(tmp_path):
    cfg = tmp_path / "rules"
    cfg.write_text("# membership as hosts\nexact /etc/hosts $BOXER_DIR/hosts\n")
    assert load_rules(str(cfg), "/run/bx").remap("/etc/hosts") == "/run/bx/hosts"


def test_file_rule_overrides_builtin(tmp_path):
    cfg = tmp_path / "rules"
    cfg.write_text("exact /etc/resolv.conf /opt/resolv\n")
    assert load_rules(str(cfg), "/run/bx").remap("/etc/resolv.conf") == "/opt/resolv"


@pytest.mark.parametrize("text,line", [
    ("exact /a relative/target\n", 1),
    ("\n# c\nprefix rel /b\n", 3),
    ("exact /a\n", 1),
    ("fuzzy /a /b\n", 1),
])
def test_parse_errors_name_the_line(text, line):
    with pytest.raises(RemapParseError) as info:
        parse_rules(text, {})
    assert info.value.lineno == line
    assert f"line {line}" in str(info.value)


def test_prefix_composition_and_identity():
    t = RemapTable([RemapRule("/var/data", "/tmp/data", "prefix")])
    assert t.remap("/var/data/x") == "/tmp/data/x"
    assert t.remap("/var/data") == "/tmp/data"
    assert t.remap("/var/database") == "/var/database"
    assert t.remap("/unmatched") == "/unmatched"
    assert t.remap("relative/path") == "relative/path"


def test_exact_beats_prefix_and_deeper_prefix_wins():
    t = RemapTable([
        RemapRule("/a", "/A", "prefix"),
        RemapRule("/a/b", "/B", "prefix"),
        RemapRule("/a/b/c", "/C", "exact"),
    ])
    assert t.remap("/a/b/c") == "/C"
    assert t.remap("/a/b/c/d") == "/B/c/d"
    assert t.remap("/a/x") == "/A/x"


def test_normalization_blocks_bypass():
    t = RemapTable([RemapRule("/etc/hosts", "/run/hosts", "exact")])
    for p in ("/etc/./hosts", "/etc//hosts", "/tmp/../etc/hosts", "//etc/hosts"):
        assert t.remap(p) == "/run/hosts"


def test_later_exact_rules_shadow_earlier():
    t = RemapTable([RemapRule("/x", "/one", "exact"), RemapRule("/x", "/two", "exact")])
    assert t.remap("/x") == "/two"


segment = st.sampled_from(["a", "b", "c", "dd", "e.f"])
abs_path = st.lists(segment, min_size=1, max_size=5).map(lambda s: "/" + "/".join(s))


def oracle(rules, path):
    # brute force: scan every rule, keep the best match
    p = normalize(path)
    best, best_len = None, -1
    for r in rules:
        m = normalize(r.match)
        if r.mode == "exact" and p == m:
            best, best_len = normalize(r.target), 10**9
        elif r.mode == "prefix" and (p == m or p.startswith(m + "/")) and len(m) >= best_len and best_len < 10**9:
            rest = p[len(m):].lstrip("/")
            best, best_len = normalize(posixpath.join(r.target, rest)) if rest else normalize(r.target), len(m)
    return path if best is None else best


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(abs_path, abs_path, st.sampled_from(["exact", "prefix"])), max_size=8), abs_path)
def test_longest_match_against_brute_force(raw, path):
    rules = [RemapRule(m, t, mode) for m, t, mode in raw]
    assert RemapTable(rules).remap(path) == oracle(rules, path)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(abs_path, abs_path), max_size=5), abs_path)
def test_unmatched_paths_are_fixed_points(pairs, path):
    rules = [RemapRule(m, t, "prefix") for m, t in pairs if not (path + "/").startswith(m + "/")]
    assert RemapTable(rules).remap(path) == path
