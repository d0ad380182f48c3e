import os

os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")
os.environ.setdefault("TOKENIZERS_PARALLELISM", "false")

import pytest

from corpusgen import vocab, write_corpus


@pytest.fixture(scope="session")
def encoder_dir(tmp_path_factory) -> str:
    """A small runnable encoder checkpoint: WordPiece tokenizer plus a
    one-layer transformer with deterministic random weights.

    initializer_range is raised well above the library default; with tiny
    weights the leading-token output is nearly constant regardless of the
    input words, which would make every downstream accuracy test vacuous.
    """
    import torch
    from tokenizers import Tokenizer
    from tokenizers.models import WordPiece
    from tokenizers.pre_tokenizers import Whitespace
    from tokenizers.processors import TemplateProcessing
    from transformers import (DistilBertConfig, DistilBertModel,
                              PreTrainedTokenizerFast)
    from transformers.utils import logging as hf_logging

    hf_logging.set_verbosity_error()
    hf_logging.disable_progress_bar()

    v = vocab()
    out = tmp_path_factory.mktemp("encoder")
    tk = Tokenizer(WordPiece(v, unk_token="[UNK]"))
    tk.pre_tokenizer = Whitespace()
    tk.post_processor = TemplateProcessing(
        single="[CLS] $A [SEP]",
        pair="[CLS] $A [SEP] $B [SEP]",
        special_tokens=[("[CLS]", v["[CLS]"]), ("[SEP]", v["[SEP]"])])
    PreTrainedTokenizerFast(tokenizer_object=tk, unk_token="[UNK]",
                            pad_token="[PAD]", cls_token="[CLS]",
                            sep_token="[SEP]",
                            mask_token="[MASK]").save_pretrained(out)
    config = DistilBertConfig(vocab_size=len(v), dim=64, n_layers=1,
                              n_heads=2, hidden_dim=128,
                              max_position_embeddings=64,
                              initializer_range=0.5)
    torch.manual_seed(0)
    DistilBertModel(config).save_pretrained(out)
    return str(out)


@pytest.fixture()
def small_corpus(tmp_path) -> str:
    path = tmp_path / "corpus.jsonl"
    write_corpus(path, 12, seed=0)
    return str(path)
