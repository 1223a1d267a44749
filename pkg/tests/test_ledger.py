import numpy as np
import pytest

from unlearnlab.errors import FormatError
from unlearnlab.ledger import LedgerEntry, UpdateLedger


def make_ledger(rng, n=7, m=5):
    init = rng.normal(size=n)
    entries = [LedgerEntry(k // 2, k % 2, (3 * k, 3 * k + 1), rng.normal(size=n)) for k in range(m)]
    led = UpdateLedger(init, entries)
    led.final = init + led.total()
    return led


def test_total_is_sequential_sum(rng):
    led = make_ledger(rng)
    s = np.zeros(7)
    for e in led.entries:
        s = s + e.delta
    assert np.array_equal(led.total(), s)
    assert led.telescopes()


def test_keep_predicate(rng):
    led = make_ledger(rng)
    part = led.total(lambda e: e.epoch == 0)
    assert np.array_equal(part, led.entries[0].delta + led.entries[1].delta)


def test_touching_and_ids(rng):
    led = make_ledger(rng)
    assert [e.member_ids for e in led.touching([4])] == [(3, 4)]
    assert led.all_ids() == {3 * k + j for k in range(5) for j in (0, 1)}


def test_file_round_trip(tmp_path, rng):
    led = make_ledger(rng)
    path = str(tmp_path / "ledger.bin")
    led.save(path)
    back = UpdateLedger.load(path)
    assert np.array_equal(back.initial, led.initial) and np.array_equal(back.final, led.final)
    assert [e.member_ids for e in back.entries] == [e.member_ids for e in led.entries]
    assert all(np.array_equal(a.delta, b.delta) for a, b in zip(back.entries, led.entries))
    assert back.telescopes()


@pytest.mark.parametrize("cut", [4, 40, -3])
def test_truncated_file_rejected(tmp_path, rng, cut):
    led = make_ledger(rng)
    path = str(tmp_path / "ledger.bin")
    led.save(path)
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[:cut])
    with pytest.raises(FormatError):
        UpdateLedger.load(path)


def test_digest_mismatch_rejected(tmp_path, rng):
    led = make_ledger(rng)
    path = str(tmp_path / "ledger.bin")
    led.save(path)
    raw = bytearray(open(path, "rb").read())
    raw[8 + 16 + 64] ^= 1  # first byte of the initial block
    open(path, "wb").write(bytes(raw))
    with pytest.raises(FormatError):
        UpdateLedger.load(path)
