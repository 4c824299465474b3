from peft_fusion.corpus.records import (
    SAMPLE_FIELDS,
    Sample,
    by_language,
    corpus_stats,
    language_counts,
    load_corpus,
    save_corpus,
    split_corpus,
)
from peft_fusion.corpus.synth import language_pool, synth_corpus, synth_samples
from peft_fusion.corpus.vocab import (
    BOS,
    EOS,
    IGNORE_INDEX,
    PAD,
    SEP,
    SPECIAL_TOKENS,
    UNK,
    EncodedSample,
    Vocabulary,
    build_vocab,
    clm_labels,
    decode,
    encode,
    tokenize,
)

__all__ = [
    "BOS",
    "EOS",
    "IGNORE_INDEX",
    "PAD",
    "SAMPLE_FIELDS",
    "SEP",
    "SPECIAL_TOKENS",
    "UNK",
    "EncodedSample",
    "Sample",
    "Vocabulary",
    "build_vocab",
    "by_language",
    "clm_labels",
    "corpus_stats",
    "decode",
    "encode",
    "language_counts",
    "language_pool",
    "load_corpus",
    "save_corpus",
    "split_corpus",
    "synth_corpus",
    "synth_samples",
    "tokenize",
]
