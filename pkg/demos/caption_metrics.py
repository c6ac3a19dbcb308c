"""
Caption metrics by hand
=======================

BLEU, METEOR, ROUGE-L and CIDEr on small corpora, including the case where
BLEU-4 collapses to the smallest positive double.
"""

from captionformer import metrics

# short candidate: perfect 1..3-gram precision, but the brevity penalty bites
corpus = [("the cat sat".split(), ["the cat sat down".split()])]
print("BLEU-3", metrics.bleu(corpus, 3))

# one reordered word splits the alignment into two chunks
print("METEOR", metrics.meteor([("a b c".split(), ["a c d".split()])]))
print("ROUGE-L", metrics.rouge_l([("a b c d".split(), ["a c d".split()])]))

# no candidate 4-gram appears in any reference
zero = [("ছেলেটি মাঠে বল খেলছে".split(), ["ছেলেটি সবুজ মাঠে বল খেলছে".split()]),
        ("দুটি কুকুর".split(), ["দুটি কুকুর".split()])]
report = metrics.evaluate(zero)
print("BLEU-4", repr(report.bleu[3]))
print(report.to_json())
