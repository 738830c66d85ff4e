import pytest
from hypothesis import given
from hypothesis import strategies as st

from glus import language
from glus.language import COLORS, MOTIONS, SHAPES, GrammarError, Referring


refs = st.builds(
    Referring,
    st.sampled_from(COLORS),
    st.sampled_from(SHAPES),
    st.one_of(
        st.tuples(st.sampled_from(MOTIONS)),
        st.tuples(st.sampled_from(MOTIONS), st.sampled_from(MOTIONS)).filter(lambda m: m[0] != m[1]),
    ),
)


@given(refs, st.integers(0, 200))
def test_render_parse_roundtrip(ref, variant):
    words = language.render(ref, variant % language.num_variants(ref))
    assert language.parse(words) == ref
    assert all(w in language.TOKEN_IDS for w in words)


@given(refs)
def test_variants_are_distinct(ref):
    n = language.num_variants(ref)
    assert len({language.render(ref, v) for v in range(n)}) == n


def test_example_sentence():
    ref = language.parse("red circle that moves left then stops")
    assert ref == Referring("red", "circle", ("move-left", "stop"))


@pytest.mark.parametrize(
    "text",
    ["red blob that moves left", "purple circle that stops", "red circle moves left", "red circle that flies", "red circle that stops then rests then stops"],
)
def test_parse_rejects(text):
    with pytest.raises(GrammarError):
        language.parse(text)


def test_special_tokens_distinct():
    ids = {language.PAD_ID, language.BOS_ID, language.EOS_ID, language.SEG_ID, language.SCORE_ID}
    assert len(ids) == 5
    assert len(set(language.VOCAB)) == len(language.VOCAB)


def test_encode_oov():
    with pytest.raises(GrammarError):
        language.encode(["red", "zebra"])


def test_selector_prompt_wraps_expression():
    p = language.selector_prompt(("red", "circle", "that", "stops"))
    assert p[:2] == ["when", "does"] and p[-1] == "?"
    assert language.encode(p)
