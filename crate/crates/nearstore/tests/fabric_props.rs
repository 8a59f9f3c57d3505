use nearstore::fabric::{Fabric, Raid0Volume};
use nearstore_core::layout::Extent;
use nearstore_core::ledger::{Direction, Edge};
use nearstore_core::topology::{DeviceDesc, FabricTopology};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn raid0_reads_back_any_write(
        devices in 1usize..6,
        stripe in 1u64..64,
        offset in 0u64..300,
        data in proptest::collection::vec(any::<u8>(), 1..600),
        window in (0usize..600, 0usize..600),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let f = Fabric::create(FabricTopology::uniform(DeviceDesc::ssd(), devices), dir.path(), &vec![1 << 12; devices]).unwrap();
        let vol = Raid0Volume { stripe, devices };
        vol.write(&f, offset, &data).unwrap();
        prop_assert_eq!(&vol.read(&f, Extent::new(offset, data.len() as u64)).unwrap(), &data);

        let (a, b) = (window.0 % data.len(), window.1 % data.len());
        let (lo, hi) = (a.min(b), a.max(b));
        let part = vol.read(&f, Extent::new(offset + lo as u64, (hi - lo) as u64)).unwrap();
        prop_assert_eq!(&part[..], &data[lo..hi]);

        let s = f.ledger().snapshot();
        prop_assert_eq!(s.total(Edge::Host, Direction::Write), data.len() as u64);
        prop_assert_eq!(s.total(Edge::Host, Direction::Read), (data.len() + hi - lo) as u64);
        prop_assert_eq!(s.total(Edge::Internal, Direction::Read) + s.total(Edge::Internal, Direction::Write), 0);
    }
}
