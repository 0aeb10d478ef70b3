import numpy as np
import pytest

from dpmm_rul import cmapss, datagen

# acceptance outcomes, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_fleet():
    cfg = datagen.default_config(2, systems_per_mode=6, seed=3)
    return datagen.generate_fleet(cfg)


def write_fake_cmapss(directory, n_per_mode=10, seed=3, subset="FD003", min_test_len=31):
    """Two-mode simulated fleet written in the C-MAPSS text layout.

    The eight simulated sensors are followed by one constant and twelve
    near-constant channels so the file has the real column count.
    """
    cfg = datagen.default_config(2, systems_per_mode=n_per_mode, seed=seed)
    fleet = datagen.generate_fleet(cfg)
    rng = np.random.default_rng(seed)
    fleet = [fleet[i] for i in rng.permutation(len(fleet))]
    half = len(fleet) // 2

    def units(part, cut):
        out = []
        for i, h in enumerate(part):
            T = h.length
            c = int(rng.integers(min(min_test_len, T), T + 1)) if cut else T
            extra = np.column_stack([np.full(T, 518.67), rng.normal(100.0, 0.05, (T, 12))])
            sensors = np.column_stack([h.readings, extra])[:c]
            out.append((cmapss.CmapssUnit(i + 1, np.arange(1, c + 1), rng.normal(0, 1e-3, (c, 3)), sensors),
                        T - c, h.true_mode))
        return out

    train, test = units(fleet[:half], False), units(fleet[half:], True)
    tr, te, rul = cmapss.fd003_paths(directory, subset)
    cmapss.write_file(tr, [u for u, _, _ in train])
    cmapss.write_file(te, [u for u, _, _ in test])
    with open(rul, "w") as fh:
        fh.writelines(f"{r}\n" for _, r, _ in test)
    labels = f"{directory}/labels.txt"
    with open(labels, "w") as fh:
        fh.writelines(f"{u.unit} {m}\n" for u, _, m in train)
    return tr, te, rul, labels
