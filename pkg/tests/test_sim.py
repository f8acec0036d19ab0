import pytest

from tandemserve.sim import Delay, EventLoop, SimGate, SimProcess, ThreadGate, WaitGate, run_blocking


class TestEventLoop:
    def test_virtual_time_advances(self):
        loop = EventLoop()
        seen = []
        loop.call_later(2.0, lambda: seen.append(loop.now()))
        loop.call_later(1.0, lambda: seen.append(loop.now()))
        loop.run_until_idle()
        assert seen == [1.0, 2.0]

    def test_same_instant_runs_in_schedule_order(self):
        loop = EventLoop()
        seen = []
        for i in range(5):
            loop.call_later(1.0, lambda i=i: seen.append(i))
        loop.run_until_idle()
        assert seen == [0, 1, 2, 3, 4]

    def test_no_scheduling_into_the_past(self):
        loop = EventLoop()
        loop.call_later(1.0, lambda: loop.call_at(0.5, lambda: None))
        with pytest.raises(ValueError):
            loop.run_until_idle()


class TestSimProcess:
    def test_delay_and_result(self):
        loop = EventLoop()

        def worker():
            yield Delay(1.5)
            yield Delay(0.5)
            return "done at " + str(loop.now())

        proc = SimProcess(loop, worker())
        loop.run_until_idle()
        assert proc.done
        assert proc.result == "done at 2.0"

    def test_gate_wakeup(self):
        loop = EventLoop()
        gate = SimGate(loop)
        order = []

        def waiter():
            order.append("parked")
            yield WaitGate(gate)
            order.append(f"woke at {loop.now()}")

        def notifier():
            yield Delay(3.0)
            gate.notify()

        SimProcess(loop, waiter())
        SimProcess(loop, notifier())
        loop.run_until_idle()
        assert order == ["parked", "woke at 3.0"]

    def test_parked_process_does_not_block_idle_exit(self):
        loop = EventLoop()
        gate = SimGate(loop)

        def forever():
            while True:
                yield WaitGate(gate)

        proc = SimProcess(loop, forever())
        loop.run_until_idle()
        assert not proc.done  # parked, but the loop drained fine


class TestRunBlocking:
    def test_returns_generator_value(self):
        def worker():
            yield Delay(0.0)
            return 42

        assert run_blocking(worker()) == 42

    def test_thread_gate_times_out_and_repolls(self):
        gate = ThreadGate(poll_interval=0.01)
        state = {"tries": 0}

        def worker():
            while state["tries"] < 3:
                state["tries"] += 1
                yield WaitGate(gate)
            return state["tries"]

        assert run_blocking(worker()) == 3
