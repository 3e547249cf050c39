use modnorm::model::TrainSchedule;

fn main() {
    let schedule = TrainSchedule::default();
    let steps = 4;
    for epoch in 0..schedule.total_epochs {
        let rates: Vec<String> = (0..steps)
            .map(|s| format!("{:.2e}", schedule.lr_at(epoch, s, steps)))
            .collect();
        println!("epoch {epoch:>2}: {}", rates.join(" "));
    }
}
