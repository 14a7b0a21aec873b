/// Timesteps whose frames form the context at `t`: the current one, the
/// `n_c` immediately preceding ones and `n_w` further back at spacing `k_w`.
/// Descending, without duplicates or negative timesteps.
pub fn select_context_frames(t: usize, n_c: usize, n_w: usize, k_w: usize) -> Vec<usize> {
    let mut out: Vec<usize> = std::iter::once(t)
        .chain((1..=n_c).filter_map(|j| t.checked_sub(j)))
        .chain((1..=n_w).filter_map(|j| t.checked_sub(k_w * j)))
        .collect();
    out.sort_unstable_by(|a, b| b.cmp(a));
    out.dedup();
    out
}
