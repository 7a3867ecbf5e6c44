/// Keys are totally ordered and reserve their extreme values as sentinels.
///
/// `MAX` plays the role of +∞ and `MIN` of −∞; neither may be stored.
pub trait Key: Copy + Ord + Send + Sync + std::fmt::Debug + 'static {
    const MIN: Self;
    const MAX: Self;

    fn is_user(self) -> bool {
        self != Self::MIN && self != Self::MAX
    }
}

macro_rules! int_key {
    ($($t:ty),*) => {$(
        impl Key for $t {
            const MIN: Self = <$t>::MIN;
            const MAX: Self = <$t>::MAX;
        }
    )*};
}

int_key!(u32, u64, i32, i64, usize);
