import os

import pytest
import torch

os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")
os.environ.setdefault("HF_HUB_OFFLINE", "1")

VOCAB = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
    "the", "a", "good", "bad", "movie", "great", "awful",
    "plot", "acting", "fun", "slow", "it", "was",
]


def _write_tokenizer(path, tokenizer_cls):
    vocab_file = os.path.join(path, "vocab.txt")
    with open(vocab_file, "w") as handle:
        handle.write("\n".join(VOCAB))
    tokenizer_cls(vocab_file).save_pretrained(path)


@pytest.fixture(scope="session")
def tiny_distilbert(tmp_path_factory):
    from transformers import DistilBertConfig, DistilBertForSequenceClassification, DistilBertTokenizer

    torch.manual_seed(7)
    path = str(tmp_path_factory.mktemp("distilbert"))
    config = DistilBertConfig(
        vocab_size=len(VOCAB), dim=16, hidden_dim=32, n_layers=1, n_heads=2,
        max_position_embeddings=64, num_labels=2,
    )
    model = DistilBertForSequenceClassification(config)
    model.eval()
    model.save_pretrained(path)
    _write_tokenizer(path, DistilBertTokenizer)
    return path


@pytest.fixture(scope="session")
def tiny_bert(tmp_path_factory):
    from transformers import BertConfig, BertForSequenceClassification, BertTokenizer

    torch.manual_seed(8)
    path = str(tmp_path_factory.mktemp("bert"))
    config = BertConfig(
        vocab_size=len(VOCAB), hidden_size=16, num_hidden_layers=1,
        num_attention_heads=2, intermediate_size=32,
        max_position_embeddings=64, num_labels=3,
    )
    model = BertForSequenceClassification(config)
    model.eval()
    model.save_pretrained(path)
    _write_tokenizer(path, BertTokenizer)
    return path


@pytest.fixture()
def input_file(tmp_path):
    lines = [
        "0\tthe movie was good",
        "1\tbad awful plot",
        "0\tgreat acting fun",
        "1\tslow bad movie",
    ]
    path = tmp_path / "inputs.tsv"
    path.write_text("\n".join(lines) + "\n")
    return str(path)
