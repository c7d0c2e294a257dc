"""Walk through the three-stage reasoning pipeline with the offline mock backend.

    python3 demos/02_reasoning_mock.py
"""

import tempfile

from ramf import CountingBackend, MockBackend, ReasoningPipeline, ResponseCache, embed_text, parse_verdict
from ramf.errors import UnparseableVerdict
from ramf.reasoning import load_templates, render_prompt, uniform_frame_refs


def main():
    templates = load_templates()
    frames = uniform_frame_refs("demo_video", 16)
    transcript = "you people should go back where you came from"

    # Each stage sees the same transcript and frames but a different framing.
    for stage in ("objective", "hate_assumed", "nonhate_assumed"):
        prompt = render_prompt(templates[stage], transcript, frames)
        print(f"--- {stage} (template v{templates[stage].version}) ---")
        print("... " + prompt[-300:].lstrip() + "\n")

    backend = CountingBackend(MockBackend())
    with tempfile.TemporaryDirectory() as cache_dir:
        pipe = ReasoningPipeline(backend, ResponseCache(cache_dir))
        triple = pipe.generate_triple("demo_video", transcript, frames)
        print("triple:", triple.texts())
        print("backend calls after first run:", backend.calls)
        pipe.generate_triple("demo_video", transcript, frames)
        print("backend calls after cached rerun:", backend.calls)

    # The texts become fixed-length embedding sequences for the fusion model.
    emb = embed_text(triple.hate_assumed, seq_len=100, dim=32)
    print("hate-assumed embedding:", emb.shape)

    # Zero-shot baselines must answer with a bare 0 or 1.
    verdict = ReasoningPipeline(MockBackend(verdict=1)).run_zero_shot(transcript, uniform_frame_refs("demo_video", 5))
    print("zero-shot verdict:", verdict)
    for reply in ("1", " 0\n", "Yes, it is hateful"):
        try:
            print(f"{reply!r} -> {parse_verdict(reply)}")
        except UnparseableVerdict:
            print(f"{reply!r} -> rejected")


if __name__ == "__main__":
    main()
