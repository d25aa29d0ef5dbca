import json
import random

import pytest

from app.core.exceptions import TokenizerFormatError, TokenizerIntegrityError
from app.services.tokenizer_service import TokenizerSpec, load_tokenizer
from tests.conftest import INDENTED_DEF_TEXT, published_vocab_dir, write_tokenizer


def _pieces(spec, text):
    return [spec.decode([idx]).decode("utf-8") for idx in spec.encode(text)]


class TestEncodeDecode:

    def test_gpt2_style_splits_indentation_per_space(self, toy_spec):
        assert _pieces(toy_spec, INDENTED_DEF_TEXT) == ["def", " foo", "():", "\n", " ", " ", " ", " pass"]

    def test_starcoder_style_merges_indentation(self, starcoder_spec):
        assert starcoder_spec.style == "starcoder"
        assert _pieces(starcoder_spec, INDENTED_DEF_TEXT) == ["def", " foo", "():", "\n   ", " pass"]

    def test_starcoder_splits_digits(self, starcoder_spec):
        assert len(starcoder_spec.encode("x = 123")) > 0
        assert [starcoder_spec.decode([i]) for i in starcoder_spec.encode("123")] == [b"1", b"2", b"3"]

    def test_round_trip_random_bytes(self, toy_spec):
        rng = random.Random(7)
        for _ in range(300):
            data = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 40)))
            assert toy_spec.decode(toy_spec.encode(data)) == data

    def test_round_trip_unicode_text(self, toy_spec):
        text = "def 函数(x):\n\treturn x  # コメント 🙂\r\n"
        assert toy_spec.decode(toy_spec.encode(text)) == text.encode("utf-8")

    def test_empty_input(self, toy_spec):
        assert toy_spec.encode("") == []
        assert toy_spec.decode([]) == b""

    def test_decode_rejects_out_of_range(self, toy_spec):
        with pytest.raises(ValueError):
            toy_spec.decode([toy_spec.vocab_size])

    def test_special_tokens_are_never_produced(self, toy_spec):
        special = toy_spec.token_id(b"<|endoftext|>")
        assert special in toy_spec.special_ids
        assert special not in toy_spec.encode("<|endoftext|>")


class TestHealing:

    def test_no_healing_when_suffix_is_not_a_prefix(self, toy_spec):
        plan = toy_spec.compute_healing("x = 1\n")
        assert plan.pending == b"" or toy_spec.is_strict_prefix(plan.pending)

    def test_heals_partial_word(self, toy_spec):
        plan = toy_spec.compute_healing("hello wo")
        assert plan.pending == b" wo"
        assert plan.trimmed_input == b"hello"
        assert plan.rolled_back_tokens == 1

    def test_trimmed_plus_pending_is_original(self, toy_spec):
        for text in ["def f", "x.retu", "print(", "hello wor", ""]:
            plan = toy_spec.compute_healing(text)
            assert plan.original == text.encode("utf-8")

    def test_pending_shorter_than_longest_token(self, toy_spec):
        plan = toy_spec.compute_healing("a" * 50 + " worl")
        assert 0 < len(plan.pending) < toy_spec.max_token_bytes

    def test_pending_is_longest_healable_suffix(self, toy_spec):
        tokens = [toy_spec.token_bytes(i) for i in range(toy_spec.vocab_size) if i not in toy_spec.special_ids]

        def extendable(suffix):
            return any(len(token) > len(suffix) and token.startswith(suffix) for token in tokens)

        rng = random.Random(3)
        texts = ["hello wo", "x.retu", "def f", "return", "x = 1\n", "pass", " worl", "():"]
        texts += ["".join(rng.choice("defoprtuwlnsa ():\n") for _ in range(rng.randrange(1, 14))) for _ in range(200)]
        for text in texts:
            data = text.encode("utf-8")
            plan = toy_spec.compute_healing(text)
            assert plan.trimmed_input + plan.pending == data
            if plan.pending:
                assert extendable(plan.pending)
            longest = max((n for n in range(1, len(data) + 1) if extendable(data[-n:])), default=0)
            assert len(plan.pending) == longest, text

    def test_candidates_cover_both_directions(self, toy_spec):
        candidates = {toy_spec.token_bytes(i) for i in toy_spec.healing_candidates(b" wo")}
        assert b" world" in candidates      # 后缀是token的前缀
        assert b" w" in candidates          # token是后缀的前缀
        assert b" " in candidates
        assert b" x" not in candidates
        assert b"<|endoftext|>" not in candidates


class TestLoading:

    def test_tokenizer_id_is_stable(self, tmp_path):
        first = load_tokenizer(write_tokenizer(tmp_path / "a"))
        second = load_tokenizer(write_tokenizer(tmp_path / "b"))
        assert first.tokenizer_id == second.tokenizer_id
        assert len(first.tokenizer_id) == 16

    def test_vocab_json_path_is_accepted(self, toy_tokenizer_dir):
        spec = load_tokenizer(toy_tokenizer_dir / "vocab.json")
        assert spec.vocab_size > 256

    def test_malformed_json_reports_position(self, tmp_path):
        directory = write_tokenizer(tmp_path / "bad")
        (directory / "vocab.json").write_text('{"a": 0,\n "b": }', encoding="utf-8")
        with pytest.raises(TokenizerFormatError, match="第2行"):
            load_tokenizer(directory)

    def test_duplicate_vocab_entry_rejected(self, tmp_path):
        directory = write_tokenizer(tmp_path / "dup")
        text = (directory / "vocab.json").read_text(encoding="utf-8")
        (directory / "vocab.json").write_text(text[:-1] + ', "de": 0}', encoding="utf-8")
        with pytest.raises(TokenizerIntegrityError):
            load_tokenizer(directory)

    def test_malformed_merge_line_reports_line(self, tmp_path):
        directory = write_tokenizer(tmp_path / "merge")
        with open(directory / "merges.txt", "a", encoding="utf-8") as handle:
            handle.write("only_one_part\n")
        with pytest.raises(TokenizerFormatError, match="第"):
            load_tokenizer(directory)

    def test_merge_outside_vocab_rejected(self, tmp_path):
        directory = write_tokenizer(tmp_path / "outside")
        with open(directory / "merges.txt", "a", encoding="utf-8") as handle:
            handle.write("x y\n")
        with pytest.raises(TokenizerIntegrityError):
            load_tokenizer(directory)

    def test_missing_byte_tokens_rejected(self):
        with pytest.raises(TokenizerIntegrityError):
            TokenizerSpec({"a": 0}, [])

    def test_missing_vocab_file(self, tmp_path):
        with pytest.raises(TokenizerFormatError):
            load_tokenizer(tmp_path / "nowhere")

    def test_auto_style_detection(self, toy_spec, starcoder_spec):
        assert toy_spec.style == "gpt2"
        assert starcoder_spec.style == "starcoder"


@pytest.mark.published_vocab
class TestPublishedVocabularies:

    def test_indented_def_token_counts(self):
        gpt2 = load_tokenizer(published_vocab_dir("GPT2_TOKENIZER_DIR"), style="gpt2")
        starcoder = load_tokenizer(published_vocab_dir("STARCODER_TOKENIZER_DIR"))
        assert len(gpt2.encode(INDENTED_DEF_TEXT)) == 8
        assert len(starcoder.encode(INDENTED_DEF_TEXT)) == 5
        assert gpt2.decode(gpt2.encode(INDENTED_DEF_TEXT)) == INDENTED_DEF_TEXT.encode("utf-8")

    def test_starcoder_merges_indentation(self):
        gpt2 = load_tokenizer(published_vocab_dir("GPT2_TOKENIZER_DIR"), style="gpt2")
        starcoder = load_tokenizer(published_vocab_dir("STARCODER_TOKENIZER_DIR"))
        for j in range(1, 9):
            text = "\n" + " " * (4 * j)
            assert len(starcoder.encode(text)) <= len(gpt2.encode(text))

    def test_gpt2_round_trip(self):
        spec = load_tokenizer(published_vocab_dir("GPT2_TOKENIZER_DIR"))
        rng = random.Random(0)
        for _ in range(1000):
            data = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 64)))
            assert spec.decode(spec.encode(data)) == data

    def test_vocab_is_valid_json(self):
        directory = published_vocab_dir("GPT2_TOKENIZER_DIR")
        assert isinstance(json.loads((directory / "vocab.json").read_text(encoding="utf-8")), dict)
