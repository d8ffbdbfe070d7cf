from ragmark.textproc import count_tokens, lexical_tokens, sentence_spans, split_sentences


def test_split_basic():
    text = "The cat sat. The dog ran. It rained."
    assert split_sentences(text) == ["The cat sat.", "The dog ran.", "It rained."]


def test_abbreviations_do_not_split():
    text = "Dr. Smith left. Mr. Jones stayed."
    assert split_sentences(text) == ["Dr. Smith left.", "Mr. Jones stayed."]


def test_lowercase_continuation_does_not_split():
    text = "He earned 3.5 points per game. Next season was worse."
    sents = split_sentences(text)
    assert sents[0] == "He earned 3.5 points per game."


def test_question_and_exclamation():
    assert split_sentences("Why? Because! So there.") == ["Why?", "Because!", "So there."]


def test_spans_cover_all_tokens():
    text = "One two three. Four five. Six."
    spans = sentence_spans(text)
    assert spans[0] == (0, 3)
    assert spans[-1][1] == len(text.split())
    covered = [i for a, b in spans for i in range(a, b)]
    assert covered == list(range(len(text.split())))


def test_no_terminal_punctuation_is_one_sentence():
    assert split_sentences("no punctuation at all here") == ["no punctuation at all here"]


def test_empty_text():
    assert split_sentences("") == []
    assert sentence_spans("   ") == []


def test_count_tokens_is_whitespace_split():
    assert count_tokens("a  b\tc\nd") == 4
    assert count_tokens("") == 0


def test_lexical_tokens_lowercase_alnum():
    assert lexical_tokens("The the, THE! x9-y") == ["the", "the", "the", "x9", "y"]
