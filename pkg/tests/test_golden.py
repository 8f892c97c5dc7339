import json

import numpy as np
import pytest

from golden_cases import CASES, FROZEN_TOLERANCE, GOLDEN, run_case

FROZEN = json.loads(GOLDEN.read_text())


@pytest.mark.parametrize("name", sorted(CASES))
def test_outputs_match_goldens(name, tmp_path):
    got = run_case(name, tmp_path)
    want = FROZEN[name]
    assert got["exit_code"] == want["exit_code"]
    assert set(got) == set(want)
    for key in want:
        if key == "exit_code":
            continue
        np.testing.assert_allclose(got[key], want[key], **FROZEN_TOLERANCE, err_msg=key)
