"""Smoke test for the myokey Python bindings."""

import os
import tempfile

import myokey


def main():
    session = myokey.Session.generate(user_seed=1, session_seed=2, duration_s=5.0)
    assert len(session.samples) == len(session) * myokey.CHANNELS
    assert session.sample_rate == myokey.SAMPLE_RATE
    assert myokey.Session.from_bytes(session.to_bytes()).to_bytes() == session.to_bytes()
    print(session, repr(session.prompt[:40]))

    features = myokey.log_spectrogram(session.samples)
    assert len(features[0]) == 32 * 33

    model = myokey.Model("tds", seed=3)
    lattice = model.emissions(session)
    assert lattice.frames == len(features) and lattice.width == 30
    print(model, lattice)

    streamed, text = myokey.stream_session(session, model, mode="low_latency")
    assert streamed == lattice, "streamed emissions differ from offline"
    assert text == myokey.greedy_decode(lattice)

    rows = [[0.1, 0.9, 0.0], [0.8, 0.1, 0.1], [0.1, 0.1, 0.8]]
    toy = myokey.Lattice.from_probs(rows)
    assert myokey.greedy_decode(toy) == myokey.KEYS[0] + myokey.KEYS[1]
    assert myokey.ctc_nll(toy, "ab") > 0.0

    lm = myokey.NgramModel(order=4)
    assert lm.score("the cat") > lm.score("tqe cxt")
    decoded = myokey.beam_decode(lattice, beam_width=8, lm=lm, correction="sentence")
    print("beam + correction:", repr(decoded[:40]))

    s, d, i, n, cer = myokey.align("kitten", "sitting")
    assert (s, d, i, n) == (2, 0, 1, 6) and abs(cer - 0.5) < 1e-12

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.emgm")
        model.save(path)
        assert myokey.Model.load(path).to_bytes() == model.to_bytes()
        lm_path = os.path.join(tmp, "lm.emgl")
        lm.save(lm_path)
        assert myokey.NgramModel.load(lm_path).score("hello") == lm.score("hello")

    data = myokey.generate_dataset(users=2, sessions_per_user=1, duration_s=4.0, seed=1)
    trained, metrics = myokey.train(
        data, eval_users=[data[-1].user_seed], arch="tds", epochs=1, steps_per_epoch=2, batch_size=2
    )
    assert metrics.startswith("epoch,train_loss,eval_cer")
    cer = myokey.evaluate(trained, data[-1:])
    assert 0.0 <= cer
    print("metrics:", metrics.strip().splitlines()[-1], "eval cer:", round(cer, 3))

    p50, p95, worst, rtf = myokey.latency_bench(model, windows=3)
    assert 0.0 < p50 <= p95 <= worst
    print(f"latency p50 {p50:.1f} ms")

    try:
        myokey.Model("lstm")
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("unknown architecture accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
