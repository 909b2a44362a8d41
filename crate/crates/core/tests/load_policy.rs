use owndsm::runtime::controller::Reason;
use owndsm::runtime::task::{Frame, TaskId};
use owndsm::runtime::{Env, Placement};
use owndsm::transport::loopback::{Cluster, ClusterSpec};
use owndsm::verifier::interp::INTERP_FN;
use owndsm::verifier::suite;

const UNIT: u64 = 1 << 20;

/// Two parked tasks on node 1 whose heap usage is set directly.
fn loaded(bytes: [u64; 2]) -> (Cluster, [TaskId; 2]) {
    let mut c = Cluster::new(ClusterSpec::new(2, UNIT), Env::with_program(suite::accumulator())).unwrap();
    c.heartbeat_every = None;
    let a = c.spawn(1, INTERP_FN, Frame::new(0, Vec::new()), Placement::Node(1)).unwrap();
    let b = c.spawn(1, INTERP_FN, Frame::new(0, Vec::new()), Placement::Node(1)).unwrap();
    for (t, n) in [a, b].into_iter().zip(bytes) {
        c.node_mut(1).heap.alloc_tagged(n, None, Some(t)).unwrap();
    }
    (c, [a, b])
}

fn tick(c: &mut Cluster) {
    c.heartbeat_round().unwrap();
    while c.core.deliver_one(0, 1) || c.core.deliver_one(1, 0) {}
}

#[test]
fn hot_node_sheds_its_largest_task_in_one_tick() {
    let (mut c, [a, b]) = loaded([UNIT * 60 / 100, UNIT * 35 / 100]);
    assert!(c.node(1).heap.used() * 100 >= UNIT * 95);
    tick(&mut c);
    let migs = c.node(0).controller.as_ref().unwrap().migrations.clone();
    assert_eq!(migs.len(), 1, "{migs:?}");
    assert_eq!((migs[0].task, migs[0].from, migs[0].to, migs[0].reason), (a, 1, 0, Reason::Memory));
    assert!(c.node(0).tasks.contains_key(&a));
    assert!(c.node(1).tasks.contains_key(&b));
    assert_eq!(c.node(0).stats.migrations_in, 1);
}

#[test]
fn balanced_cluster_stays_put() {
    let (mut c, _) = loaded([UNIT * 25 / 100, UNIT * 20 / 100]);
    for _ in 0..5 {
        tick(&mut c);
    }
    assert!(c.node(0).controller.as_ref().unwrap().migrations.is_empty());
    assert_eq!(c.node(1).tasks.len(), 2);
}
