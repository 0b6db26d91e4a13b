//! 4D window layouts: the mapping between token coordinates and
//! (window, in-window-slot) pairs, with cyclic shifts and pad handling.
//!
//! Dims are ordered (T, X, Y, Z) everywhere; memory layout is t-major with
//! x fastest, matching `Volume4D`. Partition and reverse are plain index
//! gathers, so the roundtrip is bitwise.

/// Token index for grid coords, x fastest.
#[inline]
pub fn token_index(grid: [usize; 4], c: [usize; 4]) -> usize {
    let [_, x, y, _] = grid;
    ((c[0] * grid[3] + c[3]) * y + c[2]) * x + c[1]
}

/// Inverse of [`token_index`].
#[inline]
pub fn token_coords(grid: [usize; 4], i: usize) -> [usize; 4] {
    let [_, x, y, z] = grid;
    let xi = i % x;
    let yi = (i / x) % y;
    let zi = (i / (x * y)) % z;
    let ti = i / (x * y * z);
    [ti, xi, yi, zi]
}

#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub grid: [usize; 4],
    /// Effective window, clamped to the grid per axis.
    pub window: [usize; 4],
    /// Cyclic shift per axis; zero on axes where the window covers the grid.
    pub shift: [usize; 4],
    /// Grid padded up to window multiples.
    pub padded: [usize; 4],
    pub n_windows: usize,
    pub window_len: usize,
    /// [n_windows * window_len] -> source token index, -1 for pad slots.
    to_windows: Vec<isize>,
    /// [n_tokens] -> flat (window, slot) position.
    from_windows: Vec<isize>,
}

impl WindowLayout {
    pub fn new(grid: [usize; 4], window: [usize; 4], shifted: bool) -> Self {
        let mut win = [0usize; 4];
        let mut shift = [0usize; 4];
        let mut padded = [0usize; 4];
        for a in 0..4 {
            win[a] = window[a].min(grid[a]).max(1);
            shift[a] = if shifted && win[a] < grid[a] {
                win[a] / 2
            } else {
                0
            };
            padded[a] = grid[a].div_ceil(win[a]) * win[a];
        }
        let wgrid = [
            padded[0] / win[0],
            padded[1] / win[1],
            padded[2] / win[2],
            padded[3] / win[3],
        ];
        let n_windows = wgrid.iter().product();
        let window_len = win.iter().product();
        let n_tokens: usize = grid.iter().product();

        let mut to_windows = vec![-1isize; n_windows * window_len];
        let mut from_windows = vec![-1isize; n_tokens];
        for w in 0..n_windows {
            let wc = token_coords(wgrid, w);
            for s in 0..window_len {
                let sc = token_coords(win, s);
                // padded-grid position of this slot, then undo the cyclic
                // shift to find which source token rolled into it
                let mut src = [0usize; 4];
                let mut ok = true;
                for a in 0..4 {
                    let p = wc[a] * win[a] + sc[a];
                    let q = (p + shift[a]) % padded[a];
                    if q >= grid[a] {
                        ok = false;
                        break;
                    }
                    src[a] = q;
                }
                if ok {
                    let tok = token_index(grid, src);
                    to_windows[w * window_len + s] = tok as isize;
                    from_windows[tok] = (w * window_len + s) as isize;
                }
            }
        }
        debug_assert!(from_windows.iter().all(|&v| v >= 0));

        WindowLayout {
            grid,
            window: win,
            shift,
            padded,
            n_windows,
            window_len,
            to_windows,
            from_windows,
        }
    }

    /// Gather index turning `[n_tokens, C]` into `[n_windows * window_len, C]`.
    pub fn partition_index(&self) -> &[isize] {
        &self.to_windows
    }

    /// Gather index turning the flattened windows back into `[n_tokens, C]`.
    pub fn reverse_index(&self) -> &[isize] {
        &self.from_windows
    }

    /// Source token behind a (window, slot) pair; None for pad slots.
    pub fn slot_token(&self, w: usize, s: usize) -> Option<usize> {
        let v = self.to_windows[w * self.window_len + s];
        (v >= 0).then_some(v as usize)
    }

    /// Global (t,x,y,z) coords per slot of one window; None at pads.
    pub fn slot_coords(&self, w: usize) -> Vec<Option<[usize; 4]>> {
        (0..self.window_len)
            .map(|s| self.slot_token(w, s).map(|t| token_coords(self.grid, t)))
            .collect()
    }

    /// Real-slot flags, [n_windows * window_len].
    pub fn real_slots(&self) -> Vec<bool> {
        self.to_windows.iter().map(|&v| v >= 0).collect()
    }

    /// Traversal order for sequence scans: window-major, (t,z,y,x) within
    /// window (x fastest). `reversed` flips the whole order for alternating
    /// blocks. Returns (token -> seq gather index, seq -> token gather index).
    pub fn scan_order(&self, reversed: bool) -> (Vec<isize>, Vec<isize>) {
        let l = self.to_windows.len();
        if !reversed {
            (self.to_windows.clone(), self.from_windows.clone())
        } else {
            let to: Vec<isize> = self.to_windows.iter().rev().copied().collect();
            let from: Vec<isize> = self
                .from_windows
                .iter()
                .map(|&v| (l as isize - 1) - v)
                .collect();
            (to, from)
        }
    }
}
