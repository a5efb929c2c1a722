from tossfuse.sampler import TransitionSampler


def test_sequential_batches():
    sampler = TransitionSampler(10, 4)
    batches = list(sampler)
    assert batches == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]
    assert len(sampler) == 3


def test_zero_batch_size_is_full_batch():
    sampler = TransitionSampler(7, 0)
    assert list(sampler) == [list(range(7))]
    assert len(sampler) == 1


def test_shuffled_batches_cover_everything():
    sampler = TransitionSampler(25, 6, random=True, seed=3)
    first, second = list(sampler), list(sampler)
    for epoch in (first, second):
        assert sorted(i for batch in epoch for i in batch) == list(range(25))
        assert [len(batch) for batch in epoch] == [6, 6, 6, 6, 1]
    assert first != second

    replay = TransitionSampler(25, 6, random=True, seed=3)
    assert list(replay) == first
