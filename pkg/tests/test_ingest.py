import csv
import random
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ksdyn import ingest as ing
from ksdyn.core import Action, FeatureRow, FeatureTable, KeystrokeEvent, Source, validate_row

BUFFALO_LISTING = """A KeyDown 63578429792961
A KeyUp 63578429793054
M KeyDown 63578429793257
M KeyUp 63578429793382
"""


# -- Buffalo -----------------------------------------------------------------


def test_parse_buffalo_listing():
    events = ing.parse_buffalo_events(BUFFALO_LISTING)
    assert [(e.key, e.action) for e in events[:2]] == [("A", Action.DOWN), ("A", Action.UP)]
    assert events[0].timestamp == pytest.approx(63578429792.961, abs=1e-6)
    assert events[1].timestamp == pytest.approx(63578429793.054, abs=1e-6)


def test_buffalo_listing_features():
    table = ing.events_to_features(ing.parse_buffalo_events(BUFFALO_LISTING), "u1")
    assert len(table) == 1
    r = table.rows[0]
    assert r.key == "A→M"
    # epoch-scale second stamps carry ~8e-6 s of float spacing
    assert r.H == pytest.approx(0.093, abs=1e-5)
    assert r.UD == pytest.approx(0.203, abs=1e-5)
    assert r.DD == pytest.approx(0.296, abs=1e-5)
    assert r.DD - r.H - r.UD == pytest.approx(0.0, abs=1e-9)


def test_empty_file():
    with pytest.raises(ing.FileEmpty):
        ing.parse_buffalo_events("")


def test_malformed_timestamp_is_collected():
    with pytest.raises(ing.FileEmpty) as info:
        ing.parse_buffalo_events("A KeyDown abc")
    assert info.value.report.malformed == [1]


def test_malformed_lines_do_not_abort():
    report = ing.ParseReport()
    events = ing.parse_buffalo_events("A KeyDown 10\nA KeyWiggle 12\nA KeyUp 90\nbad\n", report)
    assert len(events) == 2
    assert report.malformed == [2, 4]


def test_key_names_with_spaces():
    events = ing.parse_buffalo_events("Left Shift KeyDown 100\nLeft Shift KeyUp 180\n")
    assert events[0].key == "Left Shift"


def test_single_press_has_no_pairs():
    events = ing.parse_buffalo_events("A KeyDown 100\nA KeyUp 180\n")
    with pytest.raises(ing.NoCompletePairs):
        ing.events_to_features(events, "u")


def test_unmatched_down_is_dropped_and_counted():
    text = "A KeyDown 0\nB KeyDown 50\nA KeyUp 80\nC KeyDown 200\nC KeyUp 260\n"
    report = ing.ParseReport()
    table = ing.events_to_features(ing.parse_buffalo_events(text), "u", report=report)
    assert [r.key for r in table] == ["A→C"]
    assert report.unmatched_downs == 1


def test_rollover_dropped_unless_kept():
    # B goes down before A comes up
    text = "A KeyDown 0\nB KeyDown 60\nA KeyUp 90\nB KeyUp 150\n"
    events = ing.parse_buffalo_events(text)
    report = ing.ParseReport()
    assert len(ing.events_to_features(events, "u", report=report)) == 0
    assert report.rows_filtered_negative == 1
    kept = ing.events_to_features(events, "u", keep_negative_ud=True)
    r = kept.rows[0]
    assert (r.H, r.UD, r.DD) == pytest.approx((0.09, -0.03, 0.06))


def _random_stream(rng: random.Random, n_events: int) -> list[KeystrokeEvent]:
    """Typing-like events with rollover, autorepeat downs and stray ups."""
    events = []
    t = rng.randint(0, 10**9)
    keys = "abcde"
    while len(events) < n_events:
        k = rng.choice(keys)
        hold = rng.randint(20, 200)
        events.append(KeystrokeEvent(k, Action.DOWN, t / 1000))
        roll = rng.random()
        if roll < 0.05:
            pass  # never released
        elif roll < 0.08:
            events.append(KeystrokeEvent(rng.choice(keys), Action.UP, (t + 1) / 1000))
        else:
            events.append(KeystrokeEvent(k, Action.UP, (t + hold) / 1000))
        t += rng.randint(10, 250)
    return events[:n_events]


def _oracle_rows(events, subject):
    """Quadratic re-derivation of the FIFO pairing."""
    evs = sorted(events, key=lambda e: e.timestamp)
    used = [False] * len(evs)
    presses = []
    for j, e in enumerate(evs):
        if e.action is not Action.UP:
            continue
        for i in range(j):
            d = evs[i]
            if not used[i] and d.action is Action.DOWN and d.key == e.key:
                used[i] = True
                presses.append((i, d.key, d.timestamp, e.timestamp))
                break
    presses.sort()
    rows = []
    for (_, k1, d1, u1), (_, k2, d2, _) in zip(presses, presses[1:]):
        r = FeatureRow(subject, f"{k1}→{k2}", u1 - d1, d2 - u1, d2 - d1)
        if validate_row(r) is None:
            rows.append(r)
    return rows


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(4, 200))
def test_pairing_matches_bruteforce_oracle(seed, n):
    events = _random_stream(random.Random(seed), n)
    expected = _oracle_rows(events, "s")
    try:
        got = ing.events_to_features(events, "s").rows
    except ing.NoCompletePairs:
        got = ()
    assert list(got) == expected


def test_thousand_events_identity():
    events = _random_stream(random.Random(7), 1000)
    table = ing.events_to_features(events, "s")
    assert len(table) > 20
    assert table.rows == tuple(_oracle_rows(events, "s"))
    for r in table:
        assert r.H > 0 and r.UD >= 0 and r.DD > 0
        assert abs(r.DD - r.H - r.UD) <= 1e-9


def test_parsing_is_deterministic():
    text = "\n".join(
        f"{e.key} Key{e.action.value} {round(e.timestamp * 1000)}"
        for e in _random_stream(random.Random(3), 300)
    )
    a = ing.events_to_features(ing.parse_buffalo_events(text), "s")
    b = ing.events_to_features(ing.parse_buffalo_events(text), "s")
    assert a == b


def _write_buffalo_tree(root):
    (root / "raw").mkdir()
    files = {
        "raw/u1_s0_t1.txt": "a KeyDown 0\na KeyUp 90\nb KeyDown 200\nb KeyUp 280\nc KeyDown 400\nc KeyUp 470\n",
        "raw/u1_s1_t1.txt": "c KeyDown 1000\nc KeyUp 1080\na KeyDown 1200\na KeyUp 1290\n",
        "raw/u2_s0_t1.txt": "x KeyDown 0\nx KeyUp 100\ny KeyDown 300\ny KeyUp 380\n",
        "raw/u2_s0_t0.txt": "q KeyDown 0\nq KeyUp 100\nw KeyDown 300\nw KeyUp 380\n",
        "raw/u3_s2_t1.txt": "",
    }
    for name, text in files.items():
        (root / name).write_text(text)
    manifest = root / "manifest.csv"
    manifest.write_text(
        "path,subject,session,task,keyboard_condition\n"
        "raw/u1_s1_t1.txt,u1,1,1,same\n"
        "raw/u1_s0_t1.txt,u1,0,1,same\n"
        "raw/u2_s0_t1.txt,u2,0,1,different\n"
        "raw/u2_s0_t0.txt,u2,0,0,different\n"
        "raw/u3_s2_t1.txt,u3,2,1,same\n"
    )
    return manifest


def test_ingest_buffalo_manifest(tmp_path):
    manifest = _write_buffalo_tree(tmp_path)
    report = ing.ParseReport()
    table = ing.ingest_buffalo(manifest, tmp_path, task=1, report=report)
    assert table.source is Source.BUFFALO_FREE
    # sessions concatenated in order, no pair across files
    assert [(r.subject, r.key) for r in table] == [
        ("u1", "a→b"), ("u1", "b→c"), ("u1", "c→a"), ("u2", "x→y"),
    ]
    assert report.skipped_files == ["raw/u3_s2_t1.txt"]


def test_ingest_buffalo_session_filter(tmp_path):
    manifest = _write_buffalo_tree(tmp_path)
    table = ing.ingest_buffalo(manifest, tmp_path, task=1, sessions=[0])
    assert [r.key for r in table] == ["a→b", "b→c", "x→y"]
    fixed = ing.ingest_buffalo(manifest, tmp_path, task=0)
    assert fixed.source is Source.BUFFALO_FIXED and [r.key for r in fixed] == ["q→w"]


def test_ingest_buffalo_rejects_mixed_tasks(tmp_path):
    manifest = _write_buffalo_tree(tmp_path)
    with pytest.raises(ing.IngestError):
        ing.ingest_buffalo(manifest, tmp_path)


# -- Aalto -------------------------------------------------------------------


def _aalto_record(pid, section, ksid, press, release, letter, keycode="65"):
    return {
        "PARTICIPANT_ID": str(pid), "TEST_SECTION_ID": str(section), "SENTENCE": "s",
        "USER_INPUT": "u", "KEYSTROKE_ID": str(ksid), "PRESS_TIME": str(press),
        "RELEASE_TIME": str(release), "LETTER": letter, "KEYCODE": keycode,
    }


def test_aalto_two_keystrokes():
    recs = [_aalto_record(1, 10, 1, 0, 80, "a"), _aalto_record(1, 10, 2, 150, 230, "b")]
    table = ing.parse_aalto(recs)
    r, = table.rows
    assert (r.subject, r.key) == ("1", "a→b")
    assert (r.H, r.UD, r.DD) == pytest.approx((0.080, 0.070, 0.150), abs=1e-12)


def test_aalto_never_pairs_across_sections():
    recs = [
        _aalto_record(1, 10, 1, 0, 80, "a"), _aalto_record(1, 10, 2, 150, 230, "b"),
        _aalto_record(1, 11, 3, 300, 380, "c"), _aalto_record(1, 11, 4, 450, 530, "d"),
    ]
    assert [r.key for r in ing.parse_aalto(recs)] == ["a→b", "c→d"]


def test_aalto_keycode_fallback_and_missing_column():
    recs = [_aalto_record(1, 10, 1, 0, 80, "", "16"), _aalto_record(1, 10, 2, 150, 230, "b")]
    assert ing.parse_aalto(recs).rows[0].key == "16→b"
    bad = [{k: v for k, v in recs[0].items() if k != "RELEASE_TIME"}]
    with pytest.raises(ing.MissingColumn) as info:
        ing.parse_aalto(bad)
    assert info.value.name == "RELEASE_TIME"


def test_aalto_bad_row_breaks_chain():
    recs = [
        _aalto_record(1, 10, 1, 0, 80, "a"), _aalto_record(1, 10, 2, "x", 230, "b"),
        _aalto_record(1, 10, 3, 300, 380, "c"), _aalto_record(1, 10, 4, 450, 530, "d"),
    ]
    report = ing.ParseReport()
    assert [r.key for r in ing.parse_aalto(recs, report=report)] == ["c→d"]
    assert report.malformed == [2]


def test_aalto_fixture_row_counts(tmp_path):
    rng = random.Random(11)
    expected = 0
    paths = []
    ksid = 0
    for pid in range(1, 11):
        path = tmp_path / f"{pid}_keystrokes.txt"
        recs = []
        for section in range(rng.randint(1, 3)):
            n = rng.randint(1, 40)
            expected += n - 1  # independent count: keystrokes - 1 per section
            t = rng.randint(10**12, 2 * 10**12)
            for _ in range(n):
                hold = rng.randint(30, 150)
                ksid += 1
                recs.append(_aalto_record(pid, pid * 100 + section, ksid, t, t + hold,
                                          rng.choice("abcdef ")))
                t += hold + rng.randint(1, 300)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(recs[0]), delimiter="\t")
            w.writeheader()
            w.writerows(recs)
        paths.append(path)
    table = ing.read_aalto_files(paths)
    assert len(table) == expected
    assert len(table.subjects) == 10
    for r in table:
        assert abs(r.DD - r.H - r.UD) <= 1e-9


# -- Nanglae -----------------------------------------------------------------


def _nanglae_file(path, subject, n, scale=1.0, seed=0):
    rng = random.Random(seed)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "key", "H", "UD", "DD"])
        for _ in range(n):
            h, ud = rng.uniform(0.05, 0.15), rng.uniform(0.05, 0.3)
            w.writerow([subject, "a→b", h * scale, ud * scale, (h + ud) * scale])


def test_nanglae_passthrough():
    table = ing.parse_nanglae([{"subject": "7", "key": "a→b", "H": "0.1", "UD": "0.2", "DD": "0.3"}])
    assert table.source is Source.NANGLAE
    assert table.rows[0] == FeatureRow("7", "a→b", 0.1, 0.2, 0.3)


def test_nanglae_unit_suspicion(tmp_path):
    _nanglae_file(tmp_path / "ms.csv", "1", 20, scale=1000.0)
    with pytest.raises(ing.UnitSuspicion) as info:
        ing.read_nanglae_files([tmp_path / "ms.csv"])
    assert info.value.median_h > 5


def test_nanglae_merge_three_files(tmp_path):
    sizes = [13, 20, 7]
    paths = []
    for i, n in enumerate(sizes):
        p = tmp_path / f"part{i}.csv"
        _nanglae_file(p, str(i % 2), n, seed=i)
        paths.append(p)
    assert len(ing.read_nanglae_files(paths)) == sum(sizes)


# -- canonical CSV -----------------------------------------------------------


row_strategy = st.builds(
    FeatureRow,
    st.sampled_from(["u1", "u2", "user,3", 'q"x']),
    st.sampled_from(["a→b", " →e", ",→;"]),
    st.floats(1e-4, 9.0), st.floats(0, 9.0), st.floats(1e-4, 9.0),
)


@given(st.lists(row_strategy, max_size=30))
def test_canonical_round_trip(rows):
    table = FeatureTable.concat([FeatureTable(tuple(rows))])
    back = ing.parse_canonical_csv(ing.format_canonical_csv(table))
    assert back.allclose(table, 1e-9)


def test_canonical_header_mismatch(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("subject,H,key\nu,0.1,a→b\n")
    with pytest.raises(ing.HeaderMismatch):
        ing.read_canonical_csv(p)


def test_canonical_file_format(tmp_path):
    table = FeatureTable((FeatureRow("u", "a→b", 0.093, 0.203, 0.296),))
    p = tmp_path / "t.csv"
    ing.write_canonical_csv(table, p)
    assert p.read_text(encoding="utf-8") == "subject,key,H,UD,DD\nu,a→b,0.093000000,0.203000000,0.296000000\n"


def _big_table(n):
    return FeatureTable(tuple(
        FeatureRow(f"u{i // 1000}", "a→b", 0.05 + (i % 97) / 1000, 0.1 + (i % 89) / 1000,
                   0.15 + (i % 97) / 1000 + (i % 89) / 1000)
        for i in range(n)
    ))


def _round_trip_seconds(table, path):
    start = time.perf_counter()
    ing.write_canonical_csv(table, path)
    back = ing.read_canonical_csv(path)
    return time.perf_counter() - start, back


def test_million_row_round_trip_scales_linearly(tmp_path):
    small, big = _big_table(100_000), _big_table(1_000_000)
    t_small, back_small = _round_trip_seconds(small, tmp_path / "s.csv")
    t_big, back_big = _round_trip_seconds(big, tmp_path / "b.csv")
    assert back_small.allclose(small) and back_big.allclose(big)
    # 10x the rows should cost about 10x the time; allow generous noise
    assert t_big / t_small < 25
