//! Chunked parallel dispatch. With the `parallel` feature each chunk runs on
//! the rayon pool; otherwise the same loop runs serially. Either way every
//! chunk is written by exactly one task, so results are bit-identical.

#[cfg(feature = "parallel")]
pub(crate) fn par_chunks_mut<T, Op>(data: &mut [T], chunk: usize, op: Op)
where
    T: Send,
    Op: Fn(usize, &mut [T]) + Sync,
{
    use rayon::prelude::*;
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| op(i, c));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_chunks_mut<T, Op>(data: &mut [T], chunk: usize, op: Op)
where
    Op: Fn(usize, &mut [T]),
{
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        op(i, c);
    }
}
