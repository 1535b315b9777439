import numpy as np
import pytest

from sidemc.config import ConfigError, parse_config

MINIMAL = """
[problem]
T = 1.0
"""


def test_minimal_document_gets_defaults():
    doc = parse_config(MINIMAL)
    assert doc.run.t == 1.0 and doc.run.seed == 0 and doc.run.inner == 1000 and doc.run.threads == 1
    assert doc.run.method == "plain"
    np.testing.assert_allclose(doc.run.points[:, 0], np.linspace(-3, 3, 101))
    assert doc.spec.coefficients.d1 == 1


def test_expression_error_points_at_dangling_operator():
    text = "[problem]\nalpha = 2\n\n[coefficients]\nsigma1 = \"t+\"\n"
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    (issue,) = err.value.issues
    # value starts at column 10 with the quote; the '+' is the second character inside it
    assert (issue.line, issue.col) == (5, 12)
    assert "sigma1" in issue.message


def test_errors_are_collected_and_sorted():
    text = "[run]\nbogus = 1\n[coefficients]\nb = [\"1\", \"2\"]\n"
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    lines = [(i.line, i.col) for i in err.value.issues]
    assert lines == sorted(lines) and len(lines) == 2
    assert "unknown key 'bogus'" in err.value.issues[0].message


def test_unterminated_string_reports_position():
    with pytest.raises(ConfigError) as err:
        parse_config("[coefficients]\nphi = \"sin(x1)\n")
    assert err.value.issues[0].line == 2


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError):
        parse_config("[run]\nseed = 1\nseed = 2\n")


def test_unknown_section_rejected():
    with pytest.raises(ConfigError):
        parse_config("[nonsense]\n")


def test_z_outside_mark_field_rejected():
    with pytest.raises(ConfigError):
        parse_config("[coefficients]\nb = \"z\"\n")


def test_x_index_above_dimension_rejected():
    with pytest.raises(ConfigError):
        parse_config("[coefficients]\nb = \"x2\"\n")


def test_remove_corrections_needs_interlacer():
    with pytest.raises(ConfigError):
        parse_config("[run]\nremove_corrections = true\n")


def test_grid_and_atoms_parse():
    text = """
[problem]
alpha = 0.5
[coefficients]
H1 = "0.3*z"
phi = "sin(x1)"
[measure1]
atoms = [[1.0, 2.0, "E"],
         [-1.0, 0.5, "D"]]   # trailing comment
[run]
grid = [0, 1, 3]
seed = 4
"""
    doc = parse_config(text)
    np.testing.assert_allclose(doc.run.points[:, 0], [0.0, 0.5, 1.0])
    m = doc.spec.measures[0]
    assert m.mass() == pytest.approx(2.5)
    assert doc.run.seed == 4
    X = np.array([[0.2]])
    np.testing.assert_allclose(doc.spec.coefficients.H[0](0.0, X, np.array([2.0])), [[0.6]])


def test_escaped_string():
    doc = parse_config('[problem]\nname = "a \\"quoted\\" \\\\ name"\n')
    assert doc.spec.name == 'a "quoted" \\ name'
